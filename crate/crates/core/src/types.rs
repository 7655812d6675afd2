// SPDX-License-Identifier: Apache-2.0

//! Basic addressing types shared by the control and data planes.

use std::collections::HashMap;
use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use thiserror::Error;

/// Simulated time in microseconds.
pub type SimTime = u64;

/// Switch port number.
pub type Port = u16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AddrError {
    #[error("invalid prefix `{0}`: expected <ipv4>/<len>")]
    PrefixSyntax(String),
    #[error("invalid prefix length {0}: must be in 0..=32")]
    PrefixLength(u32),
    #[error("prefix `{0}` has host bits set")]
    HostBitsSet(String),
    #[error("invalid MAC address `{0}`")]
    Mac(String),
}

/// An IPv4 prefix with all host bits cleared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Prefix {
    addr: u32,
    len: u8,
}

impl Prefix {
    pub fn new(addr: Ipv4Addr, len: u8) -> Result<Self, AddrError> {
        if len > 32 {
            return Err(AddrError::PrefixLength(len as u32));
        }
        let raw = u32::from(addr);
        if raw & !Self::mask_of(len) != 0 {
            return Err(AddrError::HostBitsSet(format!("{addr}/{len}")));
        }
        Ok(Self { addr: raw, len })
    }

    /// Builds a prefix by clearing the host bits of `addr`.
    pub fn truncating(addr: Ipv4Addr, len: u8) -> Self {
        let len = len.min(32);
        Self {
            addr: u32::from(addr) & Self::mask_of(len),
            len,
        }
    }

    fn mask_of(len: u8) -> u32 {
        if len == 0 {
            0
        } else {
            u32::MAX << (32 - len as u32)
        }
    }

    pub fn addr(&self) -> Ipv4Addr {
        Ipv4Addr::from(self.addr)
    }

    pub fn raw_addr(&self) -> u32 {
        self.addr
    }

    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> u8 {
        self.len
    }

    pub fn mask(&self) -> u32 {
        Self::mask_of(self.len)
    }

    pub fn contains(&self, ip: Ipv4Addr) -> bool {
        u32::from(ip) & self.mask() == self.addr
    }

    /// First host address inside the prefix (the network address for /31 and /32).
    pub fn first_host(&self) -> Ipv4Addr {
        if self.len >= 31 {
            self.addr()
        } else {
            Ipv4Addr::from(self.addr + 1)
        }
    }
}

impl fmt::Display for Prefix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.addr(), self.len)
    }
}

impl FromStr for Prefix {
    type Err = AddrError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (addr, len) = s
            .split_once('/')
            .ok_or_else(|| AddrError::PrefixSyntax(s.to_string()))?;
        let addr: Ipv4Addr = addr.parse().map_err(|_| AddrError::PrefixSyntax(s.to_string()))?;
        let len: u32 = len.parse().map_err(|_| AddrError::PrefixSyntax(s.to_string()))?;
        if len > 32 {
            return Err(AddrError::PrefixLength(len));
        }
        Prefix::new(addr, len as u8)
    }
}

/// 48-bit Ethernet address stored in the low bits of a `u64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MacAddr(u64);

impl MacAddr {
    pub const MAX: u64 = (1 << 48) - 1;

    pub fn from_u64(raw: u64) -> Option<Self> {
        (raw <= Self::MAX).then_some(Self(raw))
    }

    pub fn as_u64(&self) -> u64 {
        self.0
    }

    pub fn octets(&self) -> [u8; 6] {
        let b = self.0.to_be_bytes();
        [b[2], b[3], b[4], b[5], b[6], b[7]]
    }
}

impl fmt::Display for MacAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let o = self.octets();
        write!(
            f,
            "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}",
            o[0], o[1], o[2], o[3], o[4], o[5]
        )
    }
}

impl FromStr for MacAddr {
    type Err = AddrError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut raw = 0u64;
        let mut count = 0;
        for part in s.split(':') {
            if part.len() != 2 {
                return Err(AddrError::Mac(s.to_string()));
            }
            let byte = u8::from_str_radix(part, 16).map_err(|_| AddrError::Mac(s.to_string()))?;
            raw = (raw << 8) | byte as u64;
            count += 1;
        }
        if count != 6 {
            return Err(AddrError::Mac(s.to_string()));
        }
        Ok(Self(raw))
    }
}

/// Compact handle of a peer. Ordering follows registration order and is the
/// final tie-break of the decision process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PeerId(pub u16);

impl fmt::Display for PeerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// A BGP neighbor of the supercharged router and where it is attached.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Peer {
    pub id: PeerId,
    pub name: String,
    pub router_ip: Ipv4Addr,
    pub mac: MacAddr,
    pub port: Port,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PeerError {
    #[error("duplicate peer name `{0}`")]
    DuplicateName(String),
    #[error("peer `{0}` reuses router ip {1}")]
    DuplicateIp(String, Ipv4Addr),
    #[error("peer `{0}` reuses mac {1}")]
    DuplicateMac(String, MacAddr),
    #[error("peer `{0}` reuses port {1}")]
    DuplicatePort(String, Port),
    #[error("too many peers")]
    Exhausted,
}

/// Registry of all peers known to one scenario.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PeerDirectory {
    peers: Vec<Peer>,
    by_name: HashMap<String, PeerId>,
}

impl PeerDirectory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Creates `n` peers named `p1..pn` with generated addresses.
    pub fn numbered(n: usize) -> Self {
        let mut dir = Self::new();
        for i in 1..=n {
            dir.register_auto(&format!("p{i}")).expect("numbered peers are unique");
        }
        dir
    }

    pub fn register(&mut self, name: &str, router_ip: Ipv4Addr, mac: MacAddr, port: Port) -> Result<PeerId, PeerError> {
        if self.by_name.contains_key(name) {
            return Err(PeerError::DuplicateName(name.to_string()));
        }
        for p in &self.peers {
            if p.router_ip == router_ip {
                return Err(PeerError::DuplicateIp(name.to_string(), router_ip));
            }
            if p.mac == mac {
                return Err(PeerError::DuplicateMac(name.to_string(), mac));
            }
            if p.port == port {
                return Err(PeerError::DuplicatePort(name.to_string(), port));
            }
        }
        let id = PeerId(u16::try_from(self.peers.len()).map_err(|_| PeerError::Exhausted)?);
        self.peers.push(Peer {
            id,
            name: name.to_string(),
            router_ip,
            mac,
            port,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    /// Registers a peer with addresses derived from its index:
    /// router ip 172.16.x.y, mac 02:00:00:00:x:y, port index+1.
    pub fn register_auto(&mut self, name: &str) -> Result<PeerId, PeerError> {
        let idx = self.peers.len() as u32 + 1;
        if idx > u16::MAX as u32 - 1 {
            return Err(PeerError::Exhausted);
        }
        let ip = Ipv4Addr::from(0xac10_0000 | idx);
        let mac = MacAddr(0x0200_0000_0000 | idx as u64);
        self.register(name, ip, mac, idx as Port)
    }

    /// Looks a peer up by name, registering it with generated addresses when unknown.
    pub fn get_or_register(&mut self, name: &str) -> Result<PeerId, PeerError> {
        match self.by_name.get(name) {
            Some(id) => Ok(*id),
            None => self.register_auto(name),
        }
    }

    pub fn lookup(&self, name: &str) -> Option<PeerId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: PeerId) -> &Peer {
        &self.peers[id.0 as usize]
    }

    pub fn try_get(&self, id: PeerId) -> Option<&Peer> {
        self.peers.get(id.0 as usize)
    }

    pub fn by_port(&self, port: Port) -> Option<&Peer> {
        self.peers.iter().find(|p| p.port == port)
    }

    pub fn by_ip(&self, ip: Ipv4Addr) -> Option<&Peer> {
        self.peers.iter().find(|p| p.router_ip == ip)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Peer> {
        self.peers.iter()
    }

    pub fn len(&self) -> usize {
        self.peers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.peers.is_empty()
    }
}
