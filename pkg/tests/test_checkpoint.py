import json

import numpy as np
import pytest

from fedzkt.checkpoint import CheckpointError, dumps, load_checkpoint, loads, save_checkpoint
from fedzkt.zoo import GeneratorSpec, build_classifier, build_generator


def test_round_trip_is_bit_exact(tmp_path):
    g = build_generator(GeneratorSpec((1, 8, 8), latent_dim=6, hidden_channels=(4, 2)), 3)
    g.forward(np.random.default_rng(0).standard_normal((5, 6)), training=True)  # nonzero running stats
    save_checkpoint(g, tmp_path / "g.ckpt", role="generator")
    back = load_checkpoint(tmp_path / "g.ckpt")
    assert back.same_architecture(g)
    assert back.params.tobytes() == g.params.tobytes()
    assert back.buffers.tobytes() == g.buffers.tobytes()
    assert not list(tmp_path.glob(".*tmp"))


def test_manifest_is_readable_json_with_little_endian_blob():
    net = build_classifier("cnn-a", (1, 8, 8), 3, 0)
    data = dumps(net, role="device-0")
    head, blob = data.split(b"\n", 1)
    manifest = json.loads(head)
    assert manifest["role"] == "device-0" and manifest["dtype"] == "<f8"
    assert manifest["n_params"] == net.n_params
    np.testing.assert_array_equal(np.frombuffer(blob, "<f8"), net.params)


@pytest.mark.parametrize(
    "mutate,match",
    [
        (lambda d: d.replace(b"fedzkt-net", b"other-net"), "not a"),
        (lambda d: d.replace(b'"version": 1', b'"version": 9'), "version"),
        (lambda d: d[:-8], "data bytes"),
        (lambda d: b"{broken\n" + d.split(b"\n", 1)[1], "bad manifest"),
        (lambda d: d.split(b"\n", 1)[0], "missing manifest"),
    ],
)
def test_corrupt_checkpoints_are_rejected(mutate, match):
    data = dumps(build_classifier("mlp-small", (1, 4, 4), 2, 0))
    with pytest.raises(CheckpointError, match=match):
        loads(mutate(data))
