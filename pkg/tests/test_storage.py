import json
import struct

import numpy as np
import pytest

from dern.errors import (
    MalformedHeaderError,
    ShapeMismatchError,
    TruncatedPayloadError,
    UnsupportedVersionError,
)
from dern.model import ExpertWeights, MoeLayer, MoeModel
from dern.storage import (
    load_calibration,
    load_model,
    model_from_bytes,
    model_to_bytes,
    save_calibration,
    save_model,
)

from conftest import random_expert, random_model


def _models_equal(a, b):
    assert a.meta == b.meta
    assert len(a.layers) == len(b.layers)
    for la, lb in zip(a.layers, b.layers):
        assert la.top_k == lb.top_k
        assert la.router.tobytes() == lb.router.tobytes()
        for ea, eb in zip(la.experts, lb.experts):
            for x, y in zip((ea.w_gate, ea.w_up, ea.w_down), (eb.w_gate, eb.w_up, eb.w_down)):
                assert x.shape == y.shape and x.tobytes() == y.tobytes()


def _split(buf):
    (hlen,) = struct.unpack("<Q", buf[8:16])
    return json.loads(buf[16 : 16 + hlen]), buf[16 + hlen :]


def _join(header, payload):
    hb = json.dumps(header).encode()
    return b"DERNMOE1" + struct.pack("<Q", len(hb)) + hb + payload


def test_round_trip_bit_exact(tmp_path, rng):
    m = random_model(rng, n_layers=2)
    save_model(m, tmp_path / "m.dmoe")
    _models_equal(m, load_model(tmp_path / "m.dmoe"))


def test_round_trip_mixed_intermediate_sizes(rng):
    experts = [random_expert(rng, 6, 4), random_expert(rng, 6, 9)]
    m = MoeModel([MoeLayer(experts, rng.standard_normal((2, 6)), 1)], {"name": "mixed"})
    _models_equal(m, model_from_bytes(model_to_bytes(m)))


def test_layout(rng):
    m = random_model(rng, n_layers=1)
    buf = model_to_bytes(m)
    assert buf[:8] == b"DERNMOE1"
    header, payload = _split(buf)
    assert (16 + struct.unpack("<Q", buf[8:16])[0]) % 64 == 0
    assert all(t["offset"] % 64 == 0 and t["dtype"] == "f32" for t in header["tensors"])
    names = [t["name"] for t in header["tensors"]]
    assert names[:4] == ["layers.0.router", "layers.0.experts.0.gate", "layers.0.experts.0.up", "layers.0.experts.0.down"]
    t = header["tensors"][1]
    arr = np.frombuffer(payload[t["offset"] :], dtype="<f4", count=t["shape"][0] * t["shape"][1])
    np.testing.assert_array_equal(arr.reshape(t["shape"]), m.layers[0].experts[0].w_gate)
    assert header["top_k"] == [2]


def test_unknown_header_keys_ignored(rng):
    m = random_model(rng, n_layers=1)
    header, payload = _split(model_to_bytes(m))
    header["future_field"] = {"x": 1}
    _models_equal(m, model_from_bytes(_join(header, payload)))


def test_empty_file(tmp_path):
    p = tmp_path / "empty.dmoe"
    p.write_bytes(b"")
    with pytest.raises(MalformedHeaderError):
        load_model(p)


def test_bad_json():
    with pytest.raises(MalformedHeaderError):
        model_from_bytes(b"DERNMOE1" + struct.pack("<Q", 5) + b"{nope")


def test_header_longer_than_file():
    with pytest.raises(MalformedHeaderError):
        model_from_bytes(b"DERNMOE1" + struct.pack("<Q", 500) + b"{}")


def test_unsupported_version(rng):
    buf = bytearray(model_to_bytes(random_model(rng, n_layers=1)))
    buf[7:8] = b"2"
    with pytest.raises(UnsupportedVersionError):
        model_from_bytes(bytes(buf))


def test_truncated_payload(rng):
    buf = model_to_bytes(random_model(rng, n_layers=1))
    with pytest.raises(TruncatedPayloadError):
        model_from_bytes(buf[:-200])


def test_tensor_count_mismatch(rng):
    header, payload = _split(model_to_bytes(random_model(rng, n_layers=1)))
    header["tensors"] = [t for t in header["tensors"] if not t["name"].startswith("layers.0.experts.3.")]
    with pytest.raises(ShapeMismatchError):
        model_from_bytes(_join(header, payload))


def test_extra_layer_tensors(rng):
    header, payload = _split(model_to_bytes(random_model(rng, n_layers=2)))
    header["top_k"] = header["top_k"][:1]
    with pytest.raises(ShapeMismatchError):
        model_from_bytes(_join(header, payload))


def test_inconsistent_shapes(rng):
    header, payload = _split(model_to_bytes(random_model(rng, n_layers=1)))
    for t in header["tensors"]:
        if t["name"] == "layers.0.experts.0.up":
            t["shape"] = [t["shape"][0] // 2, t["shape"][1]]
    with pytest.raises(ShapeMismatchError):
        model_from_bytes(_join(header, payload))


def test_calibration_round_trip(tmp_path, rng):
    x = rng.standard_normal((7, 5)).astype(np.float32)
    save_calibration(x, tmp_path / "c.cal")
    raw = (tmp_path / "c.cal").read_bytes()
    assert raw[:8] == b"DERNCAL1" and struct.unpack("<QQ", raw[8:24]) == (7, 5)
    assert load_calibration(tmp_path / "c.cal").tobytes() == x.tobytes()
    (tmp_path / "t.cal").write_bytes(raw[:-4])
    with pytest.raises(TruncatedPayloadError):
        load_calibration(tmp_path / "t.cal")
