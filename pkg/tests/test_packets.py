"""Header encode/decode round-trips and field validation."""

import pytest
from hypothesis import given
from hypothesis import strategies as st

from evasionlab.packets import (
    TCP_OPT_MSS,
    TCP_OPT_TIMESTAMP,
    Ipv4Header,
    PacketRecord,
    TcpHeader,
    TcpOption,
    addr_to_str,
    decode_tcp_options,
    encode_tcp_options,
    flow_key_of,
    pad_tcp_options,
    str_to_addr,
)
from helpers import make_fragment, make_ip, make_packet


# -- addresses --------------------------------------------------------------


def test_addr_str_known():
    assert addr_to_str(0x0A000001) == "10.0.0.1"
    assert str_to_addr("192.168.0.9") == 0xC0A80009


@given(st.integers(0, 2**32 - 1))
def test_addr_round_trip(addr):
    assert str_to_addr(addr_to_str(addr)) == addr


# -- IPv4 header ------------------------------------------------------------


def test_ipv4_encode_layout():
    hdr = make_ip(4)  # ihl 5, DF, ttl 64, proto 6
    raw = hdr.with_checksum().encode()
    assert len(raw) == 20
    assert raw[0] == 0x45  # version 4, ihl 5
    assert raw[8] == 64
    assert raw[9] == 6
    assert raw[12:16] == bytes([10, 0, 0, 1])


def test_ipv4_round_trip_with_options():
    opts = bytes([1, 7, 7, 4, 0, 0, 0, 0])
    hdr = make_ip(0, ihl=7, options=opts).with_checksum()
    back = Ipv4Header.decode(hdr.encode())
    assert back == hdr
    assert back.options == opts
    assert back.header_length == 28


def test_ipv4_ihl_bounds():
    with pytest.raises(ValueError):
        make_ip(0, ihl=4)
    with pytest.raises(ValueError):
        make_ip(0, ihl=16, options=bytes(44))


def test_ipv4_options_length_must_match_ihl():
    with pytest.raises(ValueError):
        make_ip(0, ihl=6, options=b"\x01")


def test_fragment_past_datagram_limit():
    with pytest.raises(ValueError):
        make_ip(1400, tcp_len=0, df=False, offset=8100)


def test_checksum_valid_flag():
    hdr = make_ip(4)
    assert not hdr.checksum_valid()
    assert hdr.with_checksum().checksum_valid()


@st.composite
def ipv4_headers(draw):
    opt_words = draw(st.integers(0, 3))
    ihl = 5 + opt_words
    payload = draw(st.integers(0, 600))
    return Ipv4Header(
        ihl=ihl,
        tos=draw(st.integers(0, 255)),
        total_length=ihl * 4 + payload,
        identification=draw(st.integers(0, 0xFFFF)),
        flag_df=draw(st.booleans()),
        flag_mf=draw(st.booleans()),
        frag_offset=draw(st.integers(0, 100)),
        ttl=draw(st.integers(0, 255)),
        protocol=6,
        checksum=draw(st.integers(0, 0xFFFF)),
        src_addr=draw(st.integers(0, 2**32 - 1)),
        dst_addr=draw(st.integers(0, 2**32 - 1)),
        options=bytes(draw(st.binary(min_size=opt_words * 4, max_size=opt_words * 4))),
    )


@given(ipv4_headers())
def test_ipv4_round_trip(hdr):
    assert Ipv4Header.decode(hdr.encode()) == hdr


# -- TCP options ------------------------------------------------------------


def test_mss_option_bytes():
    raw = encode_tcp_options((TcpOption(TCP_OPT_MSS, b"\x05\xb4"),))
    assert raw == b"\x02\x04\x05\xb4"


def test_nop_and_eol_preserved():
    opts = pad_tcp_options([TcpOption(TCP_OPT_MSS, b"\x05\xb4")])
    raw = encode_tcp_options(opts)
    assert len(raw) % 4 == 0
    assert decode_tcp_options(raw) == opts


def test_timestamp_option_round_trip():
    ts = TcpOption(TCP_OPT_TIMESTAMP, bytes(8))
    opts = pad_tcp_options([TcpOption(1), TcpOption(1), ts])
    assert decode_tcp_options(encode_tcp_options(opts)) == opts


# -- TCP header -------------------------------------------------------------


def test_flag_bit_values():
    flags = {
        "flag_fin": 0x01,
        "flag_syn": 0x02,
        "flag_rst": 0x04,
        "flag_psh": 0x08,
        "flag_ack": 0x10,
        "flag_urg": 0x20,
    }
    for name, bit in flags.items():
        hdr = TcpHeader(
            src_port=1, dst_port=2, seq=0, ack=0, data_offset=5, **{name: True}
        )
        assert hdr.flags == bit


def test_data_offset_must_cover_options():
    with pytest.raises(ValueError):
        TcpHeader(
            src_port=1,
            dst_port=2,
            seq=0,
            ack=0,
            data_offset=5,
            options=(TcpOption(TCP_OPT_MSS, b"\x05\xb4"),),
        )
    with pytest.raises(ValueError):
        TcpHeader(src_port=1, dst_port=2, seq=0, ack=0, data_offset=6)


def test_tcp_header_round_trip_with_mss():
    hdr = TcpHeader(
        src_port=40000,
        dst_port=80,
        seq=12345,
        ack=0,
        data_offset=6,
        flag_syn=True,
        window=64240,
        options=(TcpOption(TCP_OPT_MSS, b"\x05\xb4"),),
    )
    back = TcpHeader.decode(hdr.encode())
    assert back == hdr
    assert back.find_option(TCP_OPT_MSS).payload == b"\x05\xb4"


def test_find_option_missing():
    hdr = TcpHeader(src_port=1, dst_port=2, seq=0, ack=0, data_offset=5)
    assert hdr.find_option(TCP_OPT_MSS) is None


# -- packet records ---------------------------------------------------------


def test_total_length_invariant_enforced():
    with pytest.raises(ValueError):
        PacketRecord(
            ts=0.0,
            ip=make_ip(10),  # claims 10 payload bytes
            tcp=TcpHeader(src_port=1, dst_port=2, seq=0, ack=0, data_offset=5),
            payload=b"abc",
        )


def test_packet_round_trip():
    pkt = make_packet(1000, b"hello world!")
    back = PacketRecord.decode(pkt.encode(), ts=pkt.ts)
    assert back == pkt


def test_fragment_decode_has_no_tcp():
    frag = make_fragment(5, 1, b"x" * 8, mf=True)
    back = PacketRecord.decode(frag.encode(), ts=0.0)
    assert back.tcp is None
    assert back.is_fragment
    assert back.payload == b"x" * 8


def test_offset_zero_mf_fragment_is_fragment():
    frag = make_fragment(5, 0, bytes(24), mf=True)
    assert frag.is_fragment
    back = PacketRecord.decode(frag.encode(), ts=0.0)
    assert back.tcp is None


def test_with_checksums_validates_both_layers():
    pkt = make_packet(1, b"data")
    assert pkt.ip.checksum_valid()
    assert pkt.tcp_checksum_valid()


def test_ip_payload_of_full_packet_contains_tcp_header():
    pkt = make_packet(7, b"abcd")
    raw = pkt.ip_payload()
    assert len(raw) == 20 + 4
    assert raw[-4:] == b"abcd"


def test_flow_key_of_fragment_rejected():
    frag = make_fragment(5, 1, b"x" * 8, mf=True)
    with pytest.raises(Exception):
        flow_key_of(frag)


@given(st.binary(min_size=0, max_size=200), st.integers(0, 2**32 - 1))
def test_payload_and_seq_round_trip(payload, seq):
    pkt = make_packet(seq, payload)
    back = PacketRecord.decode(pkt.encode(), ts=0.0)
    assert back.payload == payload
    assert back.tcp.seq == seq
