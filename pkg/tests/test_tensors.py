import random
from fractions import Fraction

import numpy as np
import pytest

from edgepipe.tensors import (
    CapsError,
    Format,
    FrameError,
    TensorElemType,
    TensorFrame,
    TensorSpec,
    TensorsCaps,
    arithmetic_transform,
    caps_compatible,
    caps_to_string,
    frame_from_arrays,
    parse_arithmetic_chain,
    parse_caps,
    sparse_decode,
    sparse_encode,
    to_flexible,
    to_static,
)

ALL_TYPES = list(TensorElemType)


def random_caps(rng: random.Random) -> TensorsCaps:
    fmt = rng.choice([Format.STATIC, Format.FLEXIBLE, Format.SPARSE])
    framerate = None
    if rng.random() < 0.5:
        framerate = Fraction(rng.randint(1, 120), rng.randint(1, 4))
    if fmt is Format.FLEXIBLE:
        return TensorsCaps(format=fmt, framerate=framerate)
    n = rng.randint(1, 16)
    specs = []
    for _ in range(n):
        rank = rng.randint(1, 8)
        dims = tuple(rng.randint(1, 12) for _ in range(rank))
        specs.append(TensorSpec(rng.choice(ALL_TYPES), dims))
    return TensorsCaps(format=fmt, specs=tuple(specs), framerate=framerate)


def random_dense_frame(rng: random.Random, max_tensors=4, density=None) -> TensorFrame:
    n = rng.randint(1, max_tensors)
    arrays = []
    for _ in range(n):
        et = rng.choice(ALL_TYPES)
        count = rng.randint(1, 400)
        nprng = np.random.default_rng(rng.randrange(2**32))
        if et.is_float:
            arr = nprng.standard_normal(count).astype(et.dtype)
        else:
            info = np.iinfo(et.dtype)
            arr = nprng.integers(info.min, int(info.max) + 1 if info.max < 2**63 else info.max,
                                 size=count, dtype=et.dtype)
        if density is not None:
            mask = nprng.random(count) < density
            arr = arr * mask.astype(arr.dtype)
        arrays.append(arr)
    return frame_from_arrays(arrays, seq=rng.randint(0, 1000), pts=rng.randint(0, 10**12))


class TestCapsParse:
    def test_listing_multi_tensor_caps(self):
        text = ('other/tensors,num_tensors=4,'
                'dimensions="4:20:1:1,20:1:1:1,20:1:1:1,1:1:1:1",'
                'types="float32,float32,float32,float32"')
        caps = parse_caps(text)
        assert caps.format is Format.STATIC
        assert caps.num_tensors == 4
        assert caps.specs[0].dims == (4, 20, 1, 1)
        assert caps.specs[0].elem_type is TensorElemType.float32

    def test_flexible(self):
        caps = parse_caps("other/tensors,format=flexible")
        assert caps.format is Format.FLEXIBLE
        assert caps.specs == ()

    def test_single_tensor_unquoted(self):
        caps = parse_caps(
            "other/tensors,format=static,num_tensors=1,dimensions=3:300:300:1,types=uint8"
        )
        assert caps.num_tensors == 1
        # hand-computed from a 300x300 RGB frame, channel-first layout
        assert caps.specs[0].nbytes == 270000

    def test_flexbuf_marker(self):
        caps = parse_caps("other/flexbuf")
        assert caps.is_flexbuf

    def test_framerate(self):
        caps = parse_caps(
            "other/tensors,format=static,num_tensors=1,dimensions=4,types=int8,framerate=30/1"
        )
        assert caps.framerate == Fraction(30, 1)

    def test_errors_report_position(self):
        with pytest.raises(CapsError) as ei:
            parse_caps("other/tensors,format=flexible,bogus=1")
        assert ei.value.pos == 30

    @pytest.mark.parametrize("bad", [
        "",
        "video/x-raw,width=300",
        "other/tensors,format=nosuch",
        "other/tensors,num_tensors=2,dimensions=3:3,types=uint8",
        'other/tensors,num_tensors=1,dimensions="3:3,4:4",types="uint8,uint8"',
        "other/tensors,format=flexible,dimensions=3",
        "other/tensors,format=static,dimensions=3:3,types=nosuchtype",
        'other/tensors,format=static,dimensions="3:3,types=uint8',
    ])
    def test_rejects(self, bad):
        with pytest.raises(CapsError):
            parse_caps(bad)


class TestCapsRoundTrip:
    def test_flexible_canonical(self):
        assert caps_to_string(TensorsCaps(format=Format.FLEXIBLE)) == \
            "other/tensors,format=flexible"

    def test_static_canonical_contains_dims(self):
        caps = TensorsCaps(
            specs=(TensorSpec(TensorElemType.float32, (4, 20, 1, 1)),)
        )
        assert "dimensions=4:20:1:1" in caps_to_string(caps)

    def test_random_round_trip_1000(self):
        rng = random.Random(12345)
        for _ in range(1000):
            caps = random_caps(rng)
            assert parse_caps(caps_to_string(caps)) == caps


class TestCapsCompatible:
    def test_same_static(self):
        a = parse_caps("other/tensors,format=static,num_tensors=1,dimensions=3:300:300:1,types=uint8")
        assert caps_compatible(a, a)

    def test_static_to_flexible(self):
        a = parse_caps("other/tensors,format=static,num_tensors=1,dimensions=3:300:300:1,types=uint8")
        assert caps_compatible(a, TensorsCaps(format=Format.FLEXIBLE))

    def test_dim_mismatch(self):
        a = parse_caps("other/tensors,format=static,num_tensors=1,dimensions=3:300:300:1,types=uint8")
        b = parse_caps("other/tensors,format=static,num_tensors=1,dimensions=3:224:224:1,types=uint8")
        assert not caps_compatible(a, b)

    def test_sparse_needs_sparse_consumer(self):
        sp = TensorsCaps(format=Format.SPARSE, specs=(TensorSpec(TensorElemType.uint8, (4,)),))
        st = TensorsCaps(format=Format.STATIC, specs=(TensorSpec(TensorElemType.uint8, (4,)),))
        assert caps_compatible(sp, sp)
        assert not caps_compatible(sp, st)

    def test_reflexive_random(self):
        rng = random.Random(7)
        for _ in range(100):
            caps = random_caps(rng)
            if caps.format is not Format.SPARSE:
                assert caps_compatible(caps, caps)
            assert caps_compatible(caps, TensorsCaps(format=Format.FLEXIBLE))


class TestSparse:
    def test_single_nonzero(self):
        frame = frame_from_arrays([np.array([0, 0, 3.5, 0], dtype=np.float32)])
        enc = sparse_encode(frame)
        payload = enc.payloads[0]
        assert int.from_bytes(payload[:4], "little") == 1
        assert int.from_bytes(payload[4:8], "little") == 2
        assert np.frombuffer(payload[8:], dtype=np.float32)[0] == 3.5

    def test_all_zero(self):
        frame = frame_from_arrays([np.zeros(10, dtype=np.int16)])
        enc = sparse_encode(frame)
        assert int.from_bytes(enc.payloads[0][:4], "little") == 0

    def test_decode_empty(self):
        spec = TensorSpec(TensorElemType.uint8, (2, 2))
        frame = TensorFrame(Format.SPARSE, (spec,), (b"\x00\x00\x00\x00",))
        dec = sparse_decode(frame)
        assert dec.payloads[0] == bytes(4)

    def test_decode_single(self):
        spec = TensorSpec(TensorElemType.int32, (4,))
        payload = (1).to_bytes(4, "little") + (3).to_bytes(4, "little") + (7).to_bytes(4, "little")
        frame = TensorFrame(Format.SPARSE, (spec,), (payload,))
        dec = sparse_decode(frame)
        assert list(np.frombuffer(dec.payloads[0], dtype=np.int32)) == [0, 0, 0, 7]

    def test_round_trip_1000(self):
        rng = random.Random(99)
        for _ in range(1000):
            frame = random_dense_frame(rng, density=rng.choice([0.0, 0.1, 0.5, 1.0]))
            back = sparse_decode(sparse_encode(frame))
            assert back.payloads == frame.payloads
            assert back.pts == frame.pts and back.seq == frame.seq

    def test_size_formula(self):
        rng = random.Random(5)
        for _ in range(200):
            frame = random_dense_frame(rng, max_tensors=2, density=0.2)
            enc = sparse_encode(frame)
            for spec, payload, dense in zip(enc.specs, enc.payloads, frame.payloads):
                nnz = int.from_bytes(payload[:4], "little")
                e = spec.elem_type.size
                assert len(payload) == 4 + nnz * (4 + e)
                n = spec.count
                if nnz < (n * e - 4) / (4 + e):
                    assert len(payload) < len(dense)

    def test_bad_indices_rejected(self):
        spec = TensorSpec(TensorElemType.uint8, (4,))
        oob = (1).to_bytes(4, "little") + (9).to_bytes(4, "little") + b"\x01"
        with pytest.raises(FrameError):
            sparse_decode(TensorFrame(Format.SPARSE, (spec,), (oob,)))
        unordered = (
            (2).to_bytes(4, "little")
            + (2).to_bytes(4, "little") + (1).to_bytes(4, "little")
            + b"\x01\x02"
        )
        with pytest.raises(FrameError):
            sparse_decode(TensorFrame(Format.SPARSE, (spec,), (unordered,)))


class TestArithmetic:
    CHAIN = parse_arithmetic_chain("typecast:float32,add:-127.5,div:127.5")

    def test_uint8_255_maps_to_one(self):
        frame = frame_from_arrays([np.array([255], dtype=np.uint8)])
        out = arithmetic_transform(frame, self.CHAIN)
        assert out.specs[0].elem_type is TensorElemType.float32
        assert out.array(0)[0] == 1.0

    def test_uint8_0_maps_to_minus_one(self):
        frame = frame_from_arrays([np.array([0], dtype=np.uint8)])
        out = arithmetic_transform(frame, self.CHAIN)
        assert out.array(0)[0] == -1.0

    def test_empty_chain_identity(self):
        frame = frame_from_arrays([np.arange(8, dtype=np.int32)])
        assert arithmetic_transform(frame, ()) is frame

    def test_add_then_subtract_within_ulp(self):
        rng = np.random.default_rng(0)
        arr = rng.standard_normal(256).astype(np.float32)
        frame = frame_from_arrays([arr])
        chain = parse_arithmetic_chain("add:3.25,add:-3.25")
        out = arithmetic_transform(frame, chain).array(0)
        ulp = np.spacing(arr)
        assert np.all(np.abs(out - arr) <= np.abs(ulp))

    def test_saturating_narrow(self):
        frame = frame_from_arrays([np.array([300.0, -300.0, 12.0], dtype=np.float64)])
        out = arithmetic_transform(frame, parse_arithmetic_chain("typecast:uint8"))
        assert list(out.array(0)) == [255, 0, 12]

    def test_div_by_zero_rejected_at_parse(self):
        with pytest.raises(ValueError):
            parse_arithmetic_chain("div:0")

    def test_preserves_pts_seq(self):
        frame = frame_from_arrays([np.ones(4, dtype=np.uint8)], pts=123, seq=9)
        out = arithmetic_transform(frame, self.CHAIN)
        assert out.pts == 123 and out.seq == 9


class TestFormatConversion:
    def test_round_trip_identity(self):
        frame = frame_from_arrays([np.arange(6, dtype=np.uint8)], dims=[(3, 2)])
        caps = TensorsCaps(specs=frame.specs)
        back = to_static(to_flexible(frame), caps)
        assert back == frame

    def test_to_static_accepts_matching(self):
        frame = frame_from_arrays(
            [np.zeros(270000, dtype=np.uint8)], dims=[(3, 300, 300, 1)],
            format=Format.FLEXIBLE,
        )
        caps = parse_caps("other/tensors,format=static,num_tensors=1,dimensions=3:300:300:1,types=uint8")
        assert to_static(frame, caps).format is Format.STATIC

    def test_to_static_rejects_mismatch(self):
        frame = frame_from_arrays(
            [np.zeros(120000, dtype=np.uint8)], dims=[(3, 200, 200, 1)],
            format=Format.FLEXIBLE,
        )
        caps = parse_caps("other/tensors,format=static,num_tensors=1,dimensions=3:300:300:1,types=uint8")
        with pytest.raises(FrameError):
            to_static(frame, caps)
