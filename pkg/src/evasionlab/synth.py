"""Seeded synthesis of clean TCP flows and the eight atomic evasion transforms.

Transform semantics follow the fragroute family of tricks: chaff packets are
made discardable by a bad checksum or an expiring TTL, fragmentation and
segmentation carve the same bytes into smaller carriers, option insertion
pads headers without touching the stream. Every transform must satisfy one
contract, checked by :func:`evasionlab.receiver.normalize_receive`: the
normalized receiver sees exactly the clean flow's bytes.

All randomness flows from ``random.Random`` seeded per call, so identical
inputs give byte-identical outputs.
"""

from __future__ import annotations

import enum
import random
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

from .errors import EmptyPayloadError
from .packets import (
    FlowTrace,
    Ipv4Header,
    PacketRecord,
    TcpHeader,
    TcpOption,
    TCP_OPT_MSS,
    TCP_OPT_NOP,
    TCP_OPT_TIMESTAMP,
)


class EvasionLabel(enum.IntEnum):
    """The eight atomic evasion classes, with stable integer codes."""

    IP_OPT = 0
    IP_FRAG = 1
    TCP_CHAFF = 2
    IP_TOS = 3
    TCP_SEG = 4
    IP_TTL = 5
    IP_CHAFF = 6
    TCP_OPT = 7

    @property
    def tag(self) -> str:
        return self.name.lower()

    @classmethod
    def from_tag(cls, tag: str) -> "EvasionLabel":
        try:
            return cls[tag.upper()]
        except KeyError:
            raise ValueError(
                f"unknown evasion tag {tag!r}; choose from "
                f"{', '.join(m.tag for m in cls)}"
            ) from None


# Code used for untransformed flows when the optional clean class is enabled.
# Deliberately not an EvasionLabel member: the enum is exactly the 8 evasions.
CLEAN_LABEL = 8


@dataclass(frozen=True)
class SynthParams:
    """Knobs shared by all transforms. Defaults keep every transform visible
    in at least one feature dimension of every packet window."""

    seed: int = 0
    frag_units: int = 1  # fragment size in 8-byte units
    seg_bytes: int = 8  # TCP segment payload size
    chaff_rate: float = 1.0  # chaff packets per real packet
    ttl_floor: int = 1  # TTL at or below this is treated as expired
    tos_values: tuple[int, ...] = (16, 24, 17, 8)
    overlap: bool = False

    def __post_init__(self) -> None:
        if self.frag_units < 1:
            raise ValueError("frag_units must be >= 1")
        if self.seg_bytes < 1:
            raise ValueError("seg_bytes must be >= 1")
        if not 0.0 < self.chaff_rate <= 1.0:
            raise ValueError("chaff_rate must be in (0, 1]")
        if self.ttl_floor < 0:
            raise ValueError("ttl_floor must be >= 0")
        if not self.tos_values:
            raise ValueError("tos_values must be non-empty")


def generate_clean_flow(
    seed: int,
    n_packets: int,
    payload_len_range: tuple[int, int] = (16, 64),
) -> FlowTrace:
    """A syntactically valid one-direction flow: SYN then data packets.

    TTL 64, TOS 0, DF set, no options, valid checksums; sequence numbers
    advance by payload length; timestamps step by 10 ms.
    """
    if n_packets < 1:
        raise ValueError("n_packets must be >= 1")
    lo, hi = payload_len_range
    if not 1 <= lo <= hi:
        raise ValueError(f"bad payload_len_range {payload_len_range}")

    rng = random.Random(seed)
    src = 0x0A000000 | rng.randrange(1, 1 << 24)  # 10.0.0.0/8
    dst = 0xC0A80000 | rng.randrange(1, 1 << 16)  # 192.168.0.0/16
    sport = rng.randrange(1024, 65536)
    dport = rng.choice((22, 25, 80, 443, 8080))
    isn = rng.randrange(0, 1 << 32)
    ack_val = rng.randrange(0, 1 << 32)
    ip_id = rng.randrange(0, 1 << 16)
    ts = 1_600_000_000.0 + rng.randrange(0, 1_000_000) / 1000.0

    def build(seq: int, payload: bytes, idx: int, syn: bool) -> PacketRecord:
        ip = Ipv4Header(
            ihl=5,
            tos=0,
            total_length=40 + len(payload),
            identification=(ip_id + idx) & 0xFFFF,
            flag_df=True,
            flag_mf=False,
            frag_offset=0,
            ttl=64,
            protocol=6,
            checksum=0,
            src_addr=src,
            dst_addr=dst,
        )
        tcp = TcpHeader(
            src_port=sport,
            dst_port=dport,
            seq=seq,
            ack=0 if syn else ack_val,
            data_offset=5,
            flag_syn=syn,
            flag_psh=not syn,
            flag_ack=not syn,
            window=64240,
        )
        pkt = PacketRecord(ts=ts + 0.01 * idx, ip=ip, tcp=tcp, payload=payload)
        return pkt.with_checksums()

    packets = [build(isn, b"", 0, syn=True)]
    seq = (isn + 1) & 0xFFFFFFFF
    for idx in range(1, n_packets):
        length = rng.randint(lo, hi)
        payload = rng.randbytes(length)
        packets.append(build(seq, payload, idx, syn=False))
        seq = (seq + length) & 0xFFFFFFFF
    key = (src, sport, dst, dport)
    return FlowTrace(key=key, packets=packets)


# ---------------------------------------------------------------------------
# individual transforms; each takes (trace, params, rng) and returns packets
# ---------------------------------------------------------------------------


def _require_payload(trace: FlowTrace, what: str) -> None:
    if not any(p.payload for p in trace.packets if p.tcp is not None):
        raise EmptyPayloadError(f"{what} needs at least one payload-bearing packet")


def _junk(rng: random.Random, n: int) -> bytes:
    return rng.randbytes(n)


def _ip_chaff(trace: FlowTrace, params: SynthParams, rng: random.Random):
    """After each real packet, a duplicate with random payload and a
    deliberately broken IP header checksum."""
    out: list[PacketRecord] = []
    for pkt in trace.packets:
        out.append(pkt)
        if rng.random() >= params.chaff_rate:
            continue
        junk = _junk(rng, rng.randint(8, 64))
        chaff = replace(
            pkt,
            ts=pkt.ts + 1e-5,
            ip=replace(pkt.ip, total_length=pkt.ip.header_length
                       + (pkt.tcp.header_length if pkt.tcp else 0) + len(junk)),
            payload=junk,
        ).with_checksums()
        bad_ip = replace(chaff.ip, checksum=chaff.ip.checksum ^ 0xFFFF)
        out.append(replace(chaff, ip=bad_ip))
    return out


def _ip_ttl(trace: FlowTrace, params: SynthParams, rng: random.Random):
    """After each real packet, a chaff copy that expires at the TTL floor.

    All checksums on the chaff are valid; only the TTL gives it away.
    """
    out: list[PacketRecord] = []
    for pkt in trace.packets:
        out.append(pkt)
        if rng.random() >= params.chaff_rate:
            continue
        junk = _junk(rng, len(pkt.payload))
        chaff = replace(
            pkt,
            ts=pkt.ts + 1e-5,
            ip=replace(pkt.ip, ttl=params.ttl_floor),
            payload=junk,
        ).with_checksums()
        out.append(chaff)
    return out


def _tcp_chaff(trace: FlowTrace, params: SynthParams, rng: random.Random):
    """After each real segment, a same-seq segment with junk payload and an
    invalid TCP checksum (IP checksum stays valid)."""
    out: list[PacketRecord] = []
    for pkt in trace.packets:
        out.append(pkt)
        if pkt.tcp is None or rng.random() >= params.chaff_rate:
            continue
        junk = _junk(rng, len(pkt.payload) or 8)
        chaff = replace(
            pkt,
            ts=pkt.ts + 1e-5,
            ip=replace(
                pkt.ip,
                total_length=pkt.ip.header_length + pkt.tcp.header_length + len(junk),
            ),
            payload=junk,
        ).with_checksums()
        assert chaff.tcp is not None
        bad_tcp = replace(chaff.tcp, checksum=chaff.tcp.checksum ^ 0xFFFF)
        out.append(replace(chaff, tcp=bad_tcp))
    return out


def _ip_frag(trace: FlowTrace, params: SynthParams, rng: random.Random):
    """Carve each data packet's IP payload into frag_units x 8-byte fragments.

    With overlap on, every fragment after the first starts 8 bytes early and
    fills the overlapped region with junk; first-arrival reassembly keeps the
    earlier fragment's real bytes.
    """
    _require_payload(trace, "ip_frag")
    chunk_size = params.frag_units * 8
    out: list[PacketRecord] = []
    for pkt in trace.packets:
        if pkt.tcp is None or not pkt.payload:
            out.append(pkt)
            continue
        raw = pkt.ip_payload()
        chunks = [raw[i : i + chunk_size] for i in range(0, len(raw), chunk_size)]
        if len(chunks) == 1:
            out.append(pkt)
            continue
        for j, chunk in enumerate(chunks):
            offset_units = j * params.frag_units
            data = chunk
            if params.overlap and j > 0:
                offset_units -= 1
                data = _junk(rng, 8) + chunk
            ip = replace(
                pkt.ip,
                flag_df=False,
                flag_mf=j < len(chunks) - 1,
                frag_offset=offset_units,
                total_length=pkt.ip.header_length + len(data),
            ).with_checksum()
            out.append(
                PacketRecord(ts=pkt.ts + j * 1e-5, ip=ip, tcp=None, payload=data)
            )
    return out


def _ip_opt(trace: FlowTrace, params: SynthParams, rng: random.Random):
    """Grow every IP header by a NOP plus a record-route option (kind 7)."""
    opts = bytes([1, 7, 7, 4, 0, 0, 0, 0])  # NOP, then RR: kind 7, len 7, ptr 4
    out: list[PacketRecord] = []
    for pkt in trace.packets:
        ip = replace(
            pkt.ip,
            ihl=pkt.ip.ihl + 2,
            total_length=pkt.ip.total_length + len(opts),
            options=pkt.ip.options + opts,
        )
        out.append(replace(pkt, ip=ip).with_checksums())
    return out


def _ip_tos(trace: FlowTrace, params: SynthParams, rng: random.Random):
    """Rewrite the TOS byte, cycling through the configured values."""
    values = params.tos_values
    out: list[PacketRecord] = []
    for j, pkt in enumerate(trace.packets):
        ip = replace(pkt.ip, tos=values[j % len(values)])
        out.append(replace(pkt, ip=ip).with_checksums())
    return out


def _tcp_opt(trace: FlowTrace, params: SynthParams, rng: random.Random):
    """Append TCP options: MSS on the SYN, NOP+NOP+timestamp on data segments."""
    tsval = rng.randrange(1, 1 << 31)
    out: list[PacketRecord] = []
    for j, pkt in enumerate(trace.packets):
        if pkt.tcp is None:
            out.append(pkt)
            continue
        if pkt.tcp.flag_syn:
            options = (TcpOption(TCP_OPT_MSS, struct.pack("!H", 1460)),)
        elif pkt.payload:
            options = (
                TcpOption(TCP_OPT_NOP),
                TcpOption(TCP_OPT_NOP),
                TcpOption(
                    TCP_OPT_TIMESTAMP, struct.pack("!II", (tsval + j) & 0xFFFFFFFF, 0)
                ),
            )
        else:
            out.append(pkt)
            continue
        opt_len = sum(len(o.encode()) for o in options)
        tcp = replace(
            pkt.tcp, data_offset=5 + opt_len // 4, options=options
        )
        ip = replace(pkt.ip, total_length=pkt.ip.total_length + opt_len)
        out.append(replace(pkt, ip=ip, tcp=tcp).with_checksums())
    return out


def _tcp_seg(trace: FlowTrace, params: SynthParams, rng: random.Random):
    """Split each segment's payload into seg_bytes pieces with advancing seq.

    With overlap on, each piece after the first is preceded by a junk
    "resend" of the previous seg_bytes; its checksums are valid, but the
    receiver has already claimed those stream bytes.
    """
    _require_payload(trace, "tcp_seg")
    out: list[PacketRecord] = []
    for pkt in trace.packets:
        if pkt.tcp is None or len(pkt.payload) <= params.seg_bytes:
            out.append(pkt)
            continue
        chunks = [
            pkt.payload[i : i + params.seg_bytes]
            for i in range(0, len(pkt.payload), params.seg_bytes)
        ]
        emitted = 0
        for j, chunk in enumerate(chunks):
            seq_j = (pkt.tcp.seq + j * params.seg_bytes) & 0xFFFFFFFF
            if params.overlap and j > 0:
                junk = _junk(rng, params.seg_bytes)
                resend = replace(
                    pkt,
                    ts=pkt.ts + emitted * 1e-4,
                    ip=replace(
                        pkt.ip,
                        total_length=pkt.ip.header_length
                        + pkt.tcp.header_length
                        + len(junk),
                    ),
                    tcp=replace(
                        pkt.tcp, seq=(seq_j - params.seg_bytes) & 0xFFFFFFFF
                    ),
                    payload=junk,
                ).with_checksums()
                out.append(resend)
                emitted += 1
            seg = replace(
                pkt,
                ts=pkt.ts + emitted * 1e-4,
                ip=replace(
                    pkt.ip,
                    total_length=pkt.ip.header_length
                    + pkt.tcp.header_length
                    + len(chunk),
                ),
                tcp=replace(pkt.tcp, seq=seq_j),
                payload=chunk,
            ).with_checksums()
            out.append(seg)
            emitted += 1
    return out


_TRANSFORMS = {
    EvasionLabel.IP_OPT: _ip_opt,
    EvasionLabel.IP_FRAG: _ip_frag,
    EvasionLabel.TCP_CHAFF: _tcp_chaff,
    EvasionLabel.IP_TOS: _ip_tos,
    EvasionLabel.TCP_SEG: _tcp_seg,
    EvasionLabel.IP_TTL: _ip_ttl,
    EvasionLabel.IP_CHAFF: _ip_chaff,
    EvasionLabel.TCP_OPT: _tcp_opt,
}


def apply_evasion(
    trace: FlowTrace, label: EvasionLabel, params: SynthParams
) -> FlowTrace:
    """Apply one transform to a clean trace. Deterministic given params.seed."""
    rng = random.Random(params.seed)
    packets = _TRANSFORMS[EvasionLabel(label)](trace, params, rng)
    return FlowTrace(key=trace.key, packets=packets)


# ---------------------------------------------------------------------------
# corpus construction
# ---------------------------------------------------------------------------

# Salts decorrelate the three RNG streams touching one trace.
_SHAPE_SALT = 0x5348_4150
_SYNTH_SALT = 0x9E37_79B9


@dataclass(frozen=True)
class CorpusSpec:
    """One trace to build: everything a worker needs, picklable."""

    label: int  # EvasionLabel code, or CLEAN_LABEL
    trace_seed: int
    params: SynthParams
    n_packets_range: tuple[int, int]
    payload_len_range: tuple[int, int]


def _build_one(spec: CorpusSpec) -> tuple[FlowTrace, int]:
    shape_rng = random.Random(spec.trace_seed ^ _SHAPE_SALT)
    n_packets = shape_rng.randint(*spec.n_packets_range)
    clean = generate_clean_flow(
        spec.trace_seed, n_packets, spec.payload_len_range
    )
    if spec.label == CLEAN_LABEL:
        return clean, spec.label
    params = replace(spec.params, seed=spec.trace_seed ^ _SYNTH_SALT)
    return apply_evasion(clean, EvasionLabel(spec.label), params), spec.label


def build_labeled_corpus(
    n_flows_per_class: int,
    params: SynthParams,
    seed: int,
    n_packets_range: tuple[int, int] = (4, 8),
    payload_len_range: tuple[int, int] = (16, 64),
    include_clean: bool = False,
    workers: int | None = None,
) -> list[tuple[FlowTrace, int]]:
    """A balanced labeled corpus, label-major order, reproducible from seed.

    Per-trace seeds derive as seed XOR global index, so traces can be built
    in parallel without changing the result.
    """
    if n_flows_per_class < 1:
        raise ValueError("n_flows_per_class must be >= 1")
    labels: list[int] = [int(m) for m in EvasionLabel]
    if include_clean:
        labels.append(CLEAN_LABEL)
    specs = []
    g = 0
    for label in labels:
        for _ in range(n_flows_per_class):
            specs.append(
                CorpusSpec(
                    label=label,
                    trace_seed=seed ^ g,
                    params=params,
                    n_packets_range=n_packets_range,
                    payload_len_range=payload_len_range,
                )
            )
            g += 1
    if workers is not None and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_build_one, specs, chunksize=64))
    return [_build_one(s) for s in specs]


__all__ = [
    "EvasionLabel",
    "CLEAN_LABEL",
    "SynthParams",
    "generate_clean_flow",
    "apply_evasion",
    "build_labeled_corpus",
]
