//! Ethernet II / 802.1Q / IPv4 / TCP header codecs used by the lower-layer
//! parsers and by traffic generators. Checksums are not computed.

use std::net::Ipv4Addr;

use crate::model::{FlowKey, Proto};

pub const ETHERTYPE_IPV4: u16 = 0x0800;
pub const ETHERTYPE_VLAN: u16 = 0x8100;
pub const ETH_HDR_LEN: usize = 14;
pub const VLAN_TAG_LEN: usize = 4;
pub const IPV4_HDR_LEN: usize = 20;
pub const TCP_HDR_LEN: usize = 20;
pub const UDP_HDR_LEN: usize = 8;

const TCP_FIN: u8 = 0x01;
const TCP_SYN: u8 = 0x02;
const TCP_PSH: u8 = 0x08;
const TCP_ACK: u8 = 0x10;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum WireError {
    #[error("{layer} header truncated: need {need} bytes, have {have}")]
    Truncated {
        layer: &'static str,
        need: usize,
        have: usize,
    },
    #[error("unsupported ethertype {0:#06x}")]
    Ethertype(u16),
    #[error("not an IPv4 header (version {0})")]
    IpVersion(u8),
    #[error("IPv4 total length {total} disagrees with buffer of {have} bytes")]
    IpLength { total: usize, have: usize },
    #[error("unsupported IP protocol {0}")]
    IpProto(u8),
}

fn need(layer: &'static str, buf: &[u8], n: usize) -> Result<(), WireError> {
    if buf.len() < n {
        Err(WireError::Truncated {
            layer,
            need: n,
            have: buf.len(),
        })
    } else {
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EthHeader {
    pub dst: [u8; 6],
    pub src: [u8; 6],
    pub vlan: Option<u16>,
    pub ethertype: u16,
}

/// Splits an Ethernet frame into its header and the L3 payload.
pub fn parse_eth(frame: &[u8]) -> Result<(EthHeader, &[u8]), WireError> {
    need("ethernet", frame, ETH_HDR_LEN)?;
    let mut dst = [0u8; 6];
    let mut src = [0u8; 6];
    dst.copy_from_slice(&frame[0..6]);
    src.copy_from_slice(&frame[6..12]);
    let mut ethertype = u16::from_be_bytes([frame[12], frame[13]]);
    let mut off = ETH_HDR_LEN;
    let mut vlan = None;
    if ethertype == ETHERTYPE_VLAN {
        need("802.1q", frame, ETH_HDR_LEN + VLAN_TAG_LEN)?;
        vlan = Some(u16::from_be_bytes([frame[14], frame[15]]) & 0x0fff);
        ethertype = u16::from_be_bytes([frame[16], frame[17]]);
        off += VLAN_TAG_LEN;
    }
    if ethertype != ETHERTYPE_IPV4 {
        return Err(WireError::Ethertype(ethertype));
    }
    Ok((
        EthHeader {
            dst,
            src,
            vlan,
            ethertype,
        },
        &frame[off..],
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ipv4Header {
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
    pub proto: Proto,
    pub ttl: u8,
}

pub fn parse_ipv4(pkt: &[u8]) -> Result<(Ipv4Header, &[u8]), WireError> {
    need("ipv4", pkt, IPV4_HDR_LEN)?;
    let version = pkt[0] >> 4;
    if version != 4 {
        return Err(WireError::IpVersion(version));
    }
    let ihl = usize::from(pkt[0] & 0x0f) * 4;
    need("ipv4", pkt, ihl.max(IPV4_HDR_LEN))?;
    let total = usize::from(u16::from_be_bytes([pkt[2], pkt[3]]));
    if total < ihl || total > pkt.len() {
        return Err(WireError::IpLength {
            total,
            have: pkt.len(),
        });
    }
    let proto = match pkt[9] {
        6 => Proto::Tcp,
        17 => Proto::Udp,
        p => return Err(WireError::IpProto(p)),
    };
    let src = Ipv4Addr::new(pkt[12], pkt[13], pkt[14], pkt[15]);
    let dst = Ipv4Addr::new(pkt[16], pkt[17], pkt[18], pkt[19]);
    Ok((
        Ipv4Header {
            src,
            dst,
            proto,
            ttl: pkt[8],
        },
        &pkt[ihl..total],
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TcpHeader {
    pub sport: u16,
    pub dport: u16,
    pub seq: u32,
    pub ack: u32,
    pub syn: bool,
    pub fin: bool,
}

pub fn parse_tcp(seg: &[u8]) -> Result<(TcpHeader, &[u8]), WireError> {
    need("tcp", seg, TCP_HDR_LEN)?;
    let off = usize::from(seg[12] >> 4) * 4;
    need("tcp", seg, off.max(TCP_HDR_LEN))?;
    let flags = seg[13];
    Ok((
        TcpHeader {
            sport: u16::from_be_bytes([seg[0], seg[1]]),
            dport: u16::from_be_bytes([seg[2], seg[3]]),
            seq: u32::from_be_bytes([seg[4], seg[5], seg[6], seg[7]]),
            ack: u32::from_be_bytes([seg[8], seg[9], seg[10], seg[11]]),
            syn: flags & TCP_SYN != 0,
            fin: flags & TCP_FIN != 0,
        },
        &seg[off.max(TCP_HDR_LEN)..],
    ))
}

pub fn parse_udp(seg: &[u8]) -> Result<(u16, u16, &[u8]), WireError> {
    need("udp", seg, UDP_HDR_LEN)?;
    Ok((
        u16::from_be_bytes([seg[0], seg[1]]),
        u16::from_be_bytes([seg[2], seg[3]]),
        &seg[UDP_HDR_LEN..],
    ))
}

/// Frame builder for tests and traffic generators.
#[derive(Clone, Debug)]
pub struct FrameBuilder {
    pub dst_mac: [u8; 6],
    pub src_mac: [u8; 6],
    pub vlan: Option<u16>,
    pub flow: FlowKey,
}

impl FrameBuilder {
    pub fn new(flow: FlowKey, dst_mac: [u8; 6]) -> Self {
        FrameBuilder {
            dst_mac,
            src_mac: [0x02, 0, 0, 0, 0, 0xfe],
            vlan: None,
            flow,
        }
    }

    fn eth_ip(&self, l4: &[u8]) -> Vec<u8> {
        let mut out = Vec::with_capacity(ETH_HDR_LEN + VLAN_TAG_LEN + IPV4_HDR_LEN + l4.len());
        out.extend_from_slice(&self.dst_mac);
        out.extend_from_slice(&self.src_mac);
        if let Some(v) = self.vlan {
            out.extend_from_slice(&ETHERTYPE_VLAN.to_be_bytes());
            out.extend_from_slice(&(v & 0x0fff).to_be_bytes());
        }
        out.extend_from_slice(&ETHERTYPE_IPV4.to_be_bytes());
        let total = (IPV4_HDR_LEN + l4.len()) as u16;
        out.push(0x45);
        out.push(0);
        out.extend_from_slice(&total.to_be_bytes());
        out.extend_from_slice(&[0, 0, 0x40, 0]);
        out.push(64);
        out.push(match self.flow.proto {
            Proto::Tcp => 6,
            Proto::Udp => 17,
        });
        out.extend_from_slice(&[0, 0]);
        out.extend_from_slice(&self.flow.sip.octets());
        out.extend_from_slice(&self.flow.dip.octets());
        out.extend_from_slice(l4);
        out
    }

    pub fn tcp(&self, seq: u32, syn: bool, fin: bool, payload: &[u8]) -> Vec<u8> {
        let mut seg = Vec::with_capacity(TCP_HDR_LEN + payload.len());
        seg.extend_from_slice(&self.flow.sport.to_be_bytes());
        seg.extend_from_slice(&self.flow.dport.to_be_bytes());
        seg.extend_from_slice(&seq.to_be_bytes());
        seg.extend_from_slice(&0u32.to_be_bytes());
        seg.push(((TCP_HDR_LEN / 4) as u8) << 4);
        let mut flags = TCP_ACK;
        if syn {
            flags = TCP_SYN;
        }
        if fin {
            flags |= TCP_FIN;
        }
        if !payload.is_empty() {
            flags |= TCP_PSH;
        }
        seg.push(flags);
        seg.extend_from_slice(&0xffffu16.to_be_bytes());
        seg.extend_from_slice(&[0, 0, 0, 0]);
        seg.extend_from_slice(payload);
        self.eth_ip(&seg)
    }

    pub fn syn(&self, isn: u32) -> Vec<u8> {
        self.tcp(isn, true, false, &[])
    }

    pub fn udp(&self, payload: &[u8]) -> Vec<u8> {
        let mut seg = Vec::with_capacity(UDP_HDR_LEN + payload.len());
        seg.extend_from_slice(&self.flow.sport.to_be_bytes());
        seg.extend_from_slice(&self.flow.dport.to_be_bytes());
        seg.extend_from_slice(&((UDP_HDR_LEN + payload.len()) as u16).to_be_bytes());
        seg.extend_from_slice(&[0, 0]);
        seg.extend_from_slice(payload);
        self.eth_ip(&seg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flow() -> FlowKey {
        FlowKey::new(
            Ipv4Addr::new(1, 1, 1, 1),
            40000,
            Ipv4Addr::new(10, 0, 0, 2),
            8080,
            Proto::Tcp,
        )
    }

    #[test]
    fn tcp_frame_parses_back() {
        let mut b = FrameBuilder::new(flow(), [2, 0, 0, 0, 0, 1]);
        b.vlan = Some(42);
        let frame = b.tcp(1000, false, true, b"hello");
        let (eth, rest) = parse_eth(&frame).unwrap();
        assert_eq!(eth.vlan, Some(42));
        assert_eq!(eth.dst, [2, 0, 0, 0, 0, 1]);
        let (ip, rest) = parse_ipv4(rest).unwrap();
        assert_eq!((ip.src, ip.dst, ip.proto), (flow().sip, flow().dip, Proto::Tcp));
        let (tcp, body) = parse_tcp(rest).unwrap();
        assert_eq!((tcp.sport, tcp.dport, tcp.seq), (40000, 8080, 1000));
        assert!(tcp.fin && !tcp.syn);
        assert_eq!(body, b"hello");
    }

    #[test]
    fn truncated_headers_are_rejected() {
        let frame = FrameBuilder::new(flow(), [0; 6]).tcp(1, false, false, b"x");
        assert!(matches!(
            parse_eth(&frame[..10]),
            Err(WireError::Truncated { .. })
        ));
        let (_, ip) = parse_eth(&frame).unwrap();
        assert!(parse_ipv4(&ip[..12]).is_err());
        let mut bad = ip.to_vec();
        bad[0] = 0x65;
        assert_eq!(parse_ipv4(&bad), Err(WireError::IpVersion(6)));
    }
}
