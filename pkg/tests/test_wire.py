import struct

import numpy as np
import pytest
from hypothesis import given, settings

from dmpc.comm import wire
from dmpc.comm.wire import (Ack, CouplingVars, FrameDecoder, IncompleteFrame, LengthMismatchError, Shutdown,
                            TruncatedFrameError, UnknownTagError, decode, encode)
from dmpc.trajectory import Trajectory

from strategies import messages


def test_ack_frame_size():
    frame = encode(Ack(1, 0, 1, 3))
    assert len(frame) == 5 + 16
    assert frame[:5] == struct.pack(">IB", 16, Ack.tag)
    assert frame[5:] == struct.pack(">4I", 1, 0, 1, 3)


def test_trajectory_block_bytes():
    tr = Trajectory(1.0, [[0.0], [1.0]])
    frame = encode(CouplingVars(0, 1, 2, {"u:1": tr}))
    # 3 u32 ids + block count + name (u32 length + 3 bytes) + trajectory block
    assert len(frame) == 5 + 12 + 4 + (4 + 3) + (8 + 4 + 4 + 16)
    block = frame[-(8 + 4 + 4 + 16):]
    assert struct.unpack("<d", block[:8]) == (1.0,)
    assert struct.unpack(">II", block[8:16]) == (2, 1)
    assert struct.unpack("<2d", block[16:]) == (0.0, 1.0)


def test_byte_order():
    frame = encode(wire.TriggerStep(0x01020304, 0, 0))
    assert frame[0:4] == b"\x00\x00\x00\x0c"
    assert frame[5:9] == b"\x01\x02\x03\x04"
    frame = encode(wire.PlantState(1.0, {}))
    assert frame[5:13] == struct.pack("<d", 1.0)


def test_empty_input_needs_more():
    with pytest.raises(IncompleteFrame):
        decode(b"")


def test_trailing_byte_is_remainder():
    msg, rest = decode(encode(Shutdown()) + b"\x07")
    assert msg == Shutdown()
    assert rest == b"\x07"


def test_unknown_tag():
    frame = bytearray(encode(Ack(1, 0, 1, 3)))
    frame[4] = 255
    with pytest.raises(UnknownTagError):
        decode(bytes(frame))


def test_partial_frame_is_incomplete_not_corrupt():
    frame = encode(Ack(1, 2, 3, 4))
    for cut in range(len(frame)):
        with pytest.raises(IncompleteFrame):
            decode(frame[:cut])


def test_truncation_at_end_of_stream():
    frame = encode(Ack(1, 2, 3, 4))
    with pytest.raises(TruncatedFrameError):
        decode(frame[:-1], final=True)
    dec = FrameDecoder()
    assert dec.feed(frame[:7]) == []
    with pytest.raises(TruncatedFrameError):
        dec.close()


def test_length_mismatch():
    frame = bytearray(encode(Ack(1, 2, 3, 4)))
    # claim a longer payload and supply it: the Ack decoder leaves bytes over
    frame[0:4] = struct.pack(">I", 20)
    with pytest.raises(LengthMismatchError):
        decode(bytes(frame) + b"\x00" * 4)
    # claim a shorter payload
    short = bytearray(encode(Ack(1, 2, 3, 4)))
    short[0:4] = struct.pack(">I", 12)
    with pytest.raises(LengthMismatchError):
        decode(bytes(short[:5 + 12]))


def test_trajectory_count_exceeding_payload():
    tr = Trajectory(1.0, np.zeros((2, 1)))
    frame = bytearray(encode(CouplingVars(0, 1, 2, {"u:1": tr})))
    # N field of the trajectory sits 8 bytes after the block name
    pos = len(frame) - (4 + 4 + 16)
    frame[pos:pos + 4] = struct.pack(">I", 1000)
    with pytest.raises(LengthMismatchError):
        decode(bytes(frame))


def test_error_kinds_are_distinct():
    kinds = {IncompleteFrame, UnknownTagError, LengthMismatchError, TruncatedFrameError}
    for k in kinds:
        assert issubclass(k, wire.WireError)
        assert not any(issubclass(k, o) for o in kinds - {k})


def test_decoder_splits_stream_byte_by_byte():
    msgs = [Ack(1, 2, 3, 4), Shutdown(), wire.ConvergenceFlag(3, 4, True)]
    data = b"".join(encode(m) for m in msgs)
    dec = FrameDecoder()
    out = []
    for b in data:
        out += dec.feed(bytes([b]))
    assert out == msgs
    dec.close()


@settings(max_examples=300, deadline=None)
@given(messages)
def test_round_trip(msg):
    out, rest = decode(encode(msg))
    assert rest == b""
    assert out == msg
    assert encode(out) == encode(msg)


def test_key_names():
    for key in [("u", 3), ("x", 0), ("v", 1, 2)]:
        assert wire.name_key(wire.key_name(key)) == key
