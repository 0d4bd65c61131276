"""Typed IPv4/TCP packet model with byte-exact serialization.

All header types are frozen dataclasses: transforms never mutate a packet,
they build modified copies with ``dataclasses.replace``. Addresses are kept
as 32-bit ints; helpers convert to/from dotted quads for display only.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

from .errors import OddLengthError, ShapeMismatchError

IPPROTO_TCP = 6

TCP_OPT_EOL = 0
TCP_OPT_NOP = 1
TCP_OPT_MSS = 2
TCP_OPT_WSCALE = 3
TCP_OPT_TIMESTAMP = 8

IP_OPT_NOP = 1
IP_OPT_RECORD_ROUTE = 7
IP_OPT_LSRR = 131
IP_OPT_SSRR = 137

# flag bit values used by the tcpflag feature and serialization
TCP_FIN = 0x01
TCP_SYN = 0x02
TCP_RST = 0x04
TCP_PSH = 0x08
TCP_ACK = 0x10
TCP_URG = 0x20


def ipv4_checksum(data: bytes) -> int:
    """RFC 1071 internet checksum over an even-length byte string.

    The 16-bit one's-complement of the one's-complement sum of all
    big-endian 16-bit words. The checksum field inside ``data`` must
    already be zeroed by the caller.
    """
    if len(data) % 2:
        raise OddLengthError(f"checksum input has odd length {len(data)}")
    total = 0
    for (word,) in struct.iter_unpack("!H", data):
        total += word
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def tcp_checksum(src_addr: int, dst_addr: int, tcp_bytes: bytes, payload: bytes) -> int:
    """TCP checksum with the IPv4 pseudo-header (src, dst, proto 6, length).

    ``tcp_bytes`` is the serialized TCP header with its checksum field
    zeroed. Odd-length payloads are zero-padded for summation only.
    """
    seg_len = len(tcp_bytes) + len(payload)
    if seg_len > 0xFFFF:
        raise ValueError(f"TCP segment length {seg_len} exceeds 65535")
    pseudo = struct.pack("!IIBBH", src_addr, dst_addr, 0, IPPROTO_TCP, seg_len)
    data = pseudo + tcp_bytes + payload
    if len(data) % 2:
        data += b"\x00"
    return ipv4_checksum(data)


def addr_to_str(addr: int) -> str:
    return ".".join(str((addr >> s) & 0xFF) for s in (24, 16, 8, 0))


def str_to_addr(text: str) -> int:
    parts = [int(p) for p in text.split(".")]
    if len(parts) != 4 or any(not 0 <= p <= 255 for p in parts):
        raise ValueError(f"bad IPv4 address {text!r}")
    return (parts[0] << 24) | (parts[1] << 16) | (parts[2] << 8) | parts[3]


@dataclass(frozen=True)
class Ipv4Header:
    ihl: int
    tos: int
    total_length: int
    identification: int
    flag_df: bool
    flag_mf: bool
    frag_offset: int  # 8-byte units
    ttl: int
    protocol: int
    checksum: int
    src_addr: int
    dst_addr: int
    options: bytes = b""
    version: int = 4

    def __post_init__(self) -> None:
        if self.version != 4:
            raise ValueError(f"IPv4 version must be 4, got {self.version}")
        if not 5 <= self.ihl <= 15:
            raise ValueError(f"ihl {self.ihl} out of range [5, 15]")
        if len(self.options) != (self.ihl - 5) * 4:
            raise ValueError(
                f"options length {len(self.options)} != (ihl-5)*4 = {(self.ihl - 5) * 4}"
            )
        if self.frag_offset * 8 + (self.total_length - self.ihl * 4) > 0xFFFF:
            raise ValueError("fragment extends past the 65535-byte datagram limit")

    @property
    def header_length(self) -> int:
        return self.ihl * 4

    def encode(self) -> bytes:
        flags_frag = (
            (0x4000 if self.flag_df else 0)
            | (0x2000 if self.flag_mf else 0)
            | (self.frag_offset & 0x1FFF)
        )
        return (
            struct.pack(
                "!BBHHHBBHII",
                (self.version << 4) | self.ihl,
                self.tos,
                self.total_length,
                self.identification,
                flags_frag,
                self.ttl,
                self.protocol,
                self.checksum,
                self.src_addr,
                self.dst_addr,
            )
            + self.options
        )

    @classmethod
    def decode(cls, data: bytes) -> "Ipv4Header":
        if len(data) < 20:
            raise ValueError(f"IPv4 header needs 20 bytes, got {len(data)}")
        (ver_ihl, tos, total_length, ident, flags_frag, ttl, proto, checksum,
         src, dst) = struct.unpack("!BBHHHBBHII", data[:20])
        ihl = ver_ihl & 0x0F
        if len(data) < ihl * 4:
            raise ValueError("buffer shorter than declared header length")
        return cls(
            version=ver_ihl >> 4,
            ihl=ihl,
            tos=tos,
            total_length=total_length,
            identification=ident,
            flag_df=bool(flags_frag & 0x4000),
            flag_mf=bool(flags_frag & 0x2000),
            frag_offset=flags_frag & 0x1FFF,
            ttl=ttl,
            protocol=proto,
            checksum=checksum,
            src_addr=src,
            dst_addr=dst,
            options=bytes(data[20 : ihl * 4]),
        )

    def with_checksum(self) -> "Ipv4Header":
        """Copy with the checksum recomputed over the zero-checksum encoding."""
        zeroed = replace(self, checksum=0)
        return replace(self, checksum=ipv4_checksum(zeroed.encode()))

    def checksum_valid(self) -> bool:
        zeroed = replace(self, checksum=0)
        return ipv4_checksum(zeroed.encode()) == self.checksum


@dataclass(frozen=True)
class TcpOption:
    kind: int
    payload: bytes = b""

    def encode(self) -> bytes:
        if self.kind in (TCP_OPT_EOL, TCP_OPT_NOP):
            return bytes([self.kind])
        return bytes([self.kind, 2 + len(self.payload)]) + self.payload


def encode_tcp_options(options: tuple[TcpOption, ...]) -> bytes:
    return b"".join(opt.encode() for opt in options)


def pad_tcp_options(options: list[TcpOption]) -> tuple[TcpOption, ...]:
    """Append NOPs so the serialized options land on a 32-bit boundary."""
    size = len(encode_tcp_options(tuple(options)))
    padded = list(options)
    while size % 4:
        padded.append(TcpOption(TCP_OPT_NOP))
        size += 1
    return tuple(padded)


def decode_tcp_options(data: bytes) -> tuple[TcpOption, ...]:
    """Parse an option block, keeping NOP/EOL entries so encoding round-trips."""
    options: list[TcpOption] = []
    i = 0
    while i < len(data):
        kind = data[i]
        if kind in (TCP_OPT_EOL, TCP_OPT_NOP):
            options.append(TcpOption(kind))
            i += 1
            continue
        if i + 1 >= len(data):
            raise ValueError("TCP option truncated (missing length byte)")
        length = data[i + 1]
        if length < 2 or i + length > len(data):
            raise ValueError(f"TCP option kind {kind} has bad length {length}")
        options.append(TcpOption(kind, bytes(data[i + 2 : i + length])))
        i += length
    return tuple(options)


@dataclass(frozen=True)
class TcpHeader:
    src_port: int
    dst_port: int
    seq: int
    ack: int
    data_offset: int
    flag_fin: bool = False
    flag_syn: bool = False
    flag_rst: bool = False
    flag_psh: bool = False
    flag_ack: bool = False
    flag_urg: bool = False
    window: int = 65535
    checksum: int = 0
    urgent: int = 0
    options: tuple[TcpOption, ...] = ()

    def __post_init__(self) -> None:
        if not 5 <= self.data_offset <= 15:
            raise ValueError(f"data_offset {self.data_offset} out of range [5, 15]")
        opt_len = len(encode_tcp_options(self.options))
        if opt_len != (self.data_offset - 5) * 4:
            raise ValueError(
                f"serialized options ({opt_len} bytes) must fill exactly "
                f"(data_offset-5)*4 = {(self.data_offset - 5) * 4} bytes"
            )

    @property
    def header_length(self) -> int:
        return self.data_offset * 4

    @property
    def flags(self) -> int:
        return (
            (TCP_FIN if self.flag_fin else 0)
            | (TCP_SYN if self.flag_syn else 0)
            | (TCP_RST if self.flag_rst else 0)
            | (TCP_PSH if self.flag_psh else 0)
            | (TCP_ACK if self.flag_ack else 0)
            | (TCP_URG if self.flag_urg else 0)
        )

    def find_option(self, kind: int) -> TcpOption | None:
        for opt in self.options:
            if opt.kind == kind:
                return opt
        return None

    def encode(self) -> bytes:
        return (
            struct.pack(
                "!HHIIBBHHH",
                self.src_port,
                self.dst_port,
                self.seq,
                self.ack,
                self.data_offset << 4,
                self.flags,
                self.window,
                self.checksum,
                self.urgent,
            )
            + encode_tcp_options(self.options)
        )

    @classmethod
    def decode(cls, data: bytes) -> "TcpHeader":
        if len(data) < 20:
            raise ValueError(f"TCP header needs 20 bytes, got {len(data)}")
        (src_port, dst_port, seq, ack, off_rsv, flags, window, checksum,
         urgent) = struct.unpack("!HHIIBBHHH", data[:20])
        data_offset = off_rsv >> 4
        if data_offset < 5 or len(data) < data_offset * 4:
            raise ValueError("buffer shorter than declared TCP header length")
        return cls(
            src_port=src_port,
            dst_port=dst_port,
            seq=seq,
            ack=ack,
            data_offset=data_offset,
            flag_fin=bool(flags & TCP_FIN),
            flag_syn=bool(flags & TCP_SYN),
            flag_rst=bool(flags & TCP_RST),
            flag_psh=bool(flags & TCP_PSH),
            flag_ack=bool(flags & TCP_ACK),
            flag_urg=bool(flags & TCP_URG),
            window=window,
            checksum=checksum,
            urgent=urgent,
            options=decode_tcp_options(data[20 : data_offset * 4]),
        )


@dataclass(frozen=True)
class PacketRecord:
    """One captured IPv4 packet.

    ``tcp`` is None for IP fragments whose TCP header is unavailable
    (any packet with MF set or a nonzero fragment offset); ``payload``
    then holds the raw IP payload bytes of the fragment instead of the
    TCP payload.
    """

    ts: float
    ip: Ipv4Header
    tcp: TcpHeader | None
    payload: bytes = b""

    def __post_init__(self) -> None:
        expected = self.ip.header_length + len(self.payload)
        if self.tcp is not None:
            expected += self.tcp.header_length
        if self.ip.total_length != expected:
            raise ValueError(
                f"ip.total_length {self.ip.total_length} != header+payload {expected}"
            )

    @property
    def is_fragment(self) -> bool:
        return self.ip.flag_mf or self.ip.frag_offset > 0

    def ip_payload(self) -> bytes:
        """The bytes carried after the IP header (TCP header included)."""
        if self.tcp is None:
            return self.payload
        return self.tcp.encode() + self.payload

    def encode(self) -> bytes:
        return self.ip.encode() + self.ip_payload()

    @classmethod
    def decode(cls, data: bytes, ts: float = 0.0) -> "PacketRecord":
        ip = Ipv4Header.decode(data)
        if len(data) < ip.total_length:
            raise ValueError("buffer shorter than ip.total_length")
        body = data[ip.header_length : ip.total_length]
        if ip.protocol == IPPROTO_TCP and not ip.flag_mf and ip.frag_offset == 0:
            tcp = TcpHeader.decode(body)
            return cls(ts=ts, ip=ip, tcp=tcp, payload=bytes(body[tcp.header_length :]))
        return cls(ts=ts, ip=ip, tcp=None, payload=bytes(body))

    def with_checksums(self) -> "PacketRecord":
        """Copy with valid IP (and, when present, TCP) checksums."""
        tcp = self.tcp
        if tcp is not None:
            zeroed = replace(tcp, checksum=0)
            tcp = replace(
                tcp,
                checksum=tcp_checksum(
                    self.ip.src_addr, self.ip.dst_addr, zeroed.encode(), self.payload
                ),
            )
        return replace(self, ip=self.ip.with_checksum(), tcp=tcp)

    def tcp_checksum_valid(self) -> bool:
        if self.tcp is None:
            return False
        zeroed = replace(self.tcp, checksum=0)
        computed = tcp_checksum(
            self.ip.src_addr, self.ip.dst_addr, zeroed.encode(), self.payload
        )
        return computed == self.tcp.checksum


FlowKey = tuple[int, int, int, int]  # (src_addr, src_port, dst_addr, dst_port)


@dataclass
class FlowTrace:
    """Packets of one unidirectional TCP flow, in capture order."""

    key: FlowKey
    packets: list[PacketRecord] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.packets:
            raise ValueError("FlowTrace must contain at least one packet")

    def __len__(self) -> int:
        return len(self.packets)

    def total_payload(self) -> bytes:
        """Concatenated TCP payload of non-fragment packets, capture order."""
        return b"".join(p.payload for p in self.packets if p.tcp is not None)


def flow_key_of(pkt: PacketRecord) -> FlowKey:
    if pkt.tcp is None:
        raise ShapeMismatchError("cannot derive a flow key from a TCP-less fragment")
    return (pkt.ip.src_addr, pkt.tcp.src_port, pkt.ip.dst_addr, pkt.tcp.dst_port)
