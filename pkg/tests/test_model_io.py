"""Config parsing, weight CSVs, IDX/SPKF readers, input packing."""

import struct
import tempfile
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cipherspike import SHIPPED_NETWORKS, load_network
from cipherspike.errors import CapacityError, FormatError, ValidationError
from cipherspike.fixtures import build_fixture_model
from cipherspike.model_io import (
    DatasetFrames,
    load_weights_csv,
    network_to_json,
    pack_frames,
    parse_network,
    read_dataset,
    read_frames_bin,
    read_mnist_idx,
    save_weights_csv,
    weight_units,
    write_frames_bin,
    write_mnist_idx,
)

GOOD = """
{"name": "tiny", "input": {"channels": 1, "height": 8, "width": 8},
 "timesteps": 2,
 "layers": [
   {"type": "conv", "out_ch": 2, "kernel": 3, "stride": 1, "padding": 0,
    "lif": {"scale": 2.0}},
   {"type": "avgpool", "kernel": 2, "stride": 2},
   {"type": "fc", "out": 10}]}
"""


# -- network configs ---------------------------------------------------------

def test_parse_good_config():
    spec = parse_network(GOOD)
    assert spec.name == "tiny"
    assert spec.timesteps == 2
    assert [e.kind for e in spec.entries] == ["conv", "avgpool", "fc"]
    assert [g.flat for g in spec.geometries] == [2 * 6 * 6, 2 * 3 * 3, 10]
    assert spec.entries[0].lif.scale == 2.0
    assert spec.entries[1].lif is None
    assert spec.output_size == 10


@pytest.mark.parametrize("mangle,needle", [
    (lambda d: d.replace('"out": 10', '"in": 19, "out": 10'), "layer 2"),
    (lambda d: d.replace('"type": "conv"', '"type": "conv", "in_ch": 3'),
     "layer 0"),
    (lambda d: d.replace("avgpool", "maxpool"), "unknown layer type"),
    (lambda d: d.replace('"scale": 2.0', '"scale": 2.0, "gain": 1'),
     "unknown lif keys"),
    (lambda d: d.replace('"kernel": 3', '"kernel": 9'), "does not fit"),
    (lambda d: d.replace('"timesteps": 2', '"timesteps": 0'), "timesteps"),
    (lambda d: d.replace('"timesteps": 2', '"timesteps": true'), "timesteps"),
    (lambda d: d.replace('"scale": 2.0', '"tau": 1.5'), "tau"),
    (lambda d: d[:-20], "JSON"),
])
def test_parse_rejects_bad_configs(mangle, needle):
    with pytest.raises(ValidationError) as ei:
        parse_network(mangle(GOOD))
    assert needle in str(ei.value)


def test_parse_rejects_non_object():
    with pytest.raises(ValidationError):
        parse_network("[1, 2]")
    with pytest.raises(ValidationError):
        parse_network('{"input": {}, "timesteps": 1, "layers": []}')


def test_residual_requires_both_lifs():
    doc = ('{"name": "r", "input": {"channels": 4, "height": 8, "width": 8},'
           ' "timesteps": 1, "layers": [{"type": "residual", "out_ch": 4,'
           ' "stride": 1, "lif_mid": {}}]}')
    with pytest.raises(ValidationError) as ei:
        parse_network(doc)
    assert "lif_mid and lif_out" in str(ei.value)


def test_empty_layers_is_identity():
    spec = parse_network('{"name": "id", "input": {"channels": 2,'
                         ' "height": 3, "width": 3}, "timesteps": 1,'
                         ' "layers": []}')
    assert spec.entries == ()
    assert spec.output_size == 18


def test_json_roundtrip_shipped_networks():
    for name in SHIPPED_NETWORKS:
        spec = load_network(name)
        assert parse_network(network_to_json(spec)) == spec


def test_json_roundtrip_fixture_spec():
    spec, _ = build_fixture_model(seed=42)
    assert parse_network(network_to_json(spec)) == spec


# -- weight units & CSVs -----------------------------------------------------

def test_weight_units_residual_numbering():
    doc = ('{"name": "r", "input": {"channels": 3, "height": 8, "width": 8},'
           ' "timesteps": 1, "layers": ['
           '{"type": "conv", "out_ch": 4, "kernel": 3, "stride": 1,'
           ' "padding": 1},'
           '{"type": "residual", "out_ch": 8, "stride": 2,'
           ' "lif_mid": {}, "lif_out": {}},'
           '{"type": "residual", "out_ch": 8, "stride": 1,'
           ' "lif_mid": {}, "lif_out": {}},'
           '{"type": "fc", "out": 10}]}')
    units = weight_units(parse_network(doc))
    names = [u.name for u in units]
    # strided block ships a shortcut conv; the identity block does not
    assert names == ["conv0", "block1.conv1", "block1.conv2",
                     "block1.shortcut", "block2.conv1", "block2.conv2",
                     "fc3"]
    assert [u.index for u in units] == list(range(7))
    short = units[3]
    assert (short.rows, short.cols) == (8, 4)
    assert short.tensor_shape == (8, 4, 1, 1)
    conv1 = units[1]
    assert (conv1.rows, conv1.cols) == (8, 4 * 9)


@pytest.fixture()
def csv_net(tmp_path, rng):
    spec = parse_network(GOOD)
    weights = {}
    for u in weight_units(spec):
        weights[u.index] = (rng.normal(0, 1, u.tensor_shape),
                            rng.normal(0, 1, u.rows))
    save_weights_csv(tmp_path, spec, weights)
    return spec, weights, tmp_path


def test_csv_roundtrip(csv_net):
    spec, weights, d = csv_net
    loaded = load_weights_csv(d, spec)
    for i, (w, b) in weights.items():
        assert np.allclose(loaded[i][0], w)
        assert np.allclose(loaded[i][1], b)


def test_csv_missing_bias_means_zero(csv_net):
    spec, weights, d = csv_net
    (d / "layer1_bias.csv").unlink()
    loaded = load_weights_csv(d, spec)
    assert np.array_equal(loaded[1][1], np.zeros(10))


def test_csv_missing_weight_file(csv_net):
    spec, _, d = csv_net
    (d / "layer0_weight.csv").unlink()
    with pytest.raises(ValidationError) as ei:
        load_weights_csv(d, spec)
    assert "layer0_weight.csv" in str(ei.value)


@pytest.mark.parametrize("edit", ["row_plus", "row_minus", "col_plus",
                                  "col_minus"])
def test_csv_off_by_one_rejected(csv_net, edit, rng):
    """A transposed or truncated export is the classic silent-corruption
    path; the loader must name the file and both shapes."""
    spec, _, d = csv_net
    u = weight_units(spec)[0]  # conv0: 2 x 9
    r, c = u.rows, u.cols
    if edit == "row_plus":
        r += 1
    elif edit == "row_minus":
        r -= 1
    elif edit == "col_plus":
        c += 1
    else:
        c -= 1
    np.savetxt(d / "layer0_weight.csv", rng.normal(0, 1, (r, c)),
               delimiter=",")
    with pytest.raises(ValidationError) as ei:
        load_weights_csv(d, spec)
    msg = str(ei.value)
    assert "layer0_weight.csv" in msg
    assert f"{u.rows}x{u.cols}" in msg
    assert f"{r}x{c}" in msg


def test_csv_ragged_file_rejected(csv_net):
    spec, _, d = csv_net
    (d / "layer0_weight.csv").write_text("1,2,3\n4,5\n")
    with pytest.raises(ValidationError):
        load_weights_csv(d, spec)


def test_csv_bad_bias_length(csv_net):
    spec, _, d = csv_net
    np.savetxt(d / "layer0_bias.csv", np.zeros((3, 1)), delimiter=",")
    with pytest.raises(ValidationError) as ei:
        load_weights_csv(d, spec)
    assert "bias" in str(ei.value)


# -- IDX ---------------------------------------------------------------------

def idx_bytes(magic, count, h, w, pixels):
    return struct.pack(">IIII", magic, count, h, w) + bytes(pixels)


def label_bytes(magic, labels):
    return struct.pack(">II", magic, len(labels)) + bytes(labels)


def test_idx_hand_built_single(tmp_path):
    """Fixture 1: one 2x2 image, known pixel values."""
    (tmp_path / "i.idx").write_bytes(
        idx_bytes(0x803, 1, 2, 2, [0, 128, 255, 64]))
    (tmp_path / "l.idx").write_bytes(label_bytes(0x801, [7]))
    ds = read_mnist_idx(tmp_path / "i.idx", tmp_path / "l.idx")
    assert ds.data.shape == (1, 1, 1, 2, 2)
    assert np.allclose(ds.data[0, 0, 0],
                       [[0, 128 / 255], [1.0, 64 / 255]])
    assert ds.labels.tolist() == [7]


def test_idx_hand_built_pair(tmp_path):
    """Fixture 2: two 3x2 images; row-major order must be preserved."""
    pix = list(range(12))
    (tmp_path / "i.idx").write_bytes(idx_bytes(0x803, 2, 3, 2, pix))
    (tmp_path / "l.idx").write_bytes(label_bytes(0x801, [1, 9]))
    ds = read_mnist_idx(tmp_path / "i.idx", tmp_path / "l.idx")
    assert ds.data.shape == (2, 1, 1, 3, 2)
    assert np.allclose(ds.data[1, 0, 0] * 255, [[6, 7], [8, 9], [10, 11]])
    assert ds.labels.tolist() == [1, 9]


def test_idx_hand_built_empty(tmp_path):
    """Fixture 3: zero images is well-formed, not an error."""
    (tmp_path / "i.idx").write_bytes(idx_bytes(0x803, 0, 28, 28, []))
    (tmp_path / "l.idx").write_bytes(label_bytes(0x801, []))
    ds = read_mnist_idx(tmp_path / "i.idx", tmp_path / "l.idx")
    assert ds.count == 0


def test_idx_bad_magic(tmp_path):
    (tmp_path / "i.idx").write_bytes(idx_bytes(0x804, 1, 2, 2, [0] * 4))
    (tmp_path / "l.idx").write_bytes(label_bytes(0x801, [0]))
    with pytest.raises(FormatError) as ei:
        read_mnist_idx(tmp_path / "i.idx", tmp_path / "l.idx")
    assert "magic" in str(ei.value)


def test_idx_bad_label_magic(tmp_path):
    (tmp_path / "i.idx").write_bytes(idx_bytes(0x803, 1, 2, 2, [0] * 4))
    (tmp_path / "l.idx").write_bytes(label_bytes(0x803, [0]))
    with pytest.raises(FormatError):
        read_mnist_idx(tmp_path / "i.idx", tmp_path / "l.idx")


def test_idx_truncated_payload(tmp_path):
    (tmp_path / "i.idx").write_bytes(idx_bytes(0x803, 2, 2, 2, [0] * 5))
    (tmp_path / "l.idx").write_bytes(label_bytes(0x801, [0, 1]))
    with pytest.raises(FormatError) as ei:
        read_mnist_idx(tmp_path / "i.idx", tmp_path / "l.idx")
    assert "expected" in str(ei.value)


def test_idx_count_mismatch(tmp_path):
    (tmp_path / "i.idx").write_bytes(idx_bytes(0x803, 1, 2, 2, [0] * 4))
    (tmp_path / "l.idx").write_bytes(label_bytes(0x801, [0, 1]))
    with pytest.raises(FormatError):
        read_mnist_idx(tmp_path / "i.idx", tmp_path / "l.idx")


def test_idx_write_read_roundtrip(tmp_path, rng):
    images = rng.uniform(0, 1, (5, 4, 4))
    labels = rng.integers(0, 10, 5)
    write_mnist_idx(tmp_path / "i.idx", tmp_path / "l.idx", images, labels)
    ds = read_mnist_idx(tmp_path / "i.idx", tmp_path / "l.idx")
    assert np.max(np.abs(ds.data[:, 0, 0] - images)) <= 0.5 / 255
    assert np.array_equal(ds.labels, labels)


# -- SPKF --------------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(t=st.integers(1, 4), c=st.integers(1, 3), h=st.integers(1, 6),
       w=st.integers(1, 6), count=st.integers(0, 5), seed=st.integers(0, 99))
def test_spkf_roundtrip_bit_exact(t, c, h, w, count, seed):
    rng = np.random.default_rng(seed)
    data = rng.normal(0, 1, (count, t, c, h, w)).astype("<f4")
    frames = DatasetFrames(data=data.astype(np.float64),
                           labels=rng.integers(0, 10, count, dtype=np.uint8))
    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "x.spkf"
        write_frames_bin(p, frames)
        back = read_frames_bin(p)
        assert np.array_equal(back.data, frames.data)
        assert np.array_equal(back.labels, frames.labels)
        # writing again produces identical bytes
        p2 = Path(d) / "again.spkf"
        write_frames_bin(p2, back)
        assert p.read_bytes() == p2.read_bytes()


@pytest.mark.parametrize("mangle,needle", [
    (lambda b: b"JUNK" + b[4:], "header"),
    (lambda b: b.replace(b"v1", b"v2"), "header"),
    (lambda b: b[:-1], "expected"),
    (lambda b: b + b"\x00", "expected"),
    (lambda b: b.replace(b" 2 ", b" x ", 1), "SPKF"),
])
def test_spkf_rejects_corruption(tmp_path, rng, mangle, needle):
    frames = DatasetFrames(
        data=rng.normal(0, 1, (3, 2, 1, 4, 4)).astype("<f4").astype(float),
        labels=np.array([1, 2, 3], dtype=np.uint8))
    p = tmp_path / "good.spkf"
    write_frames_bin(p, frames)
    bad = tmp_path / "bad.spkf"
    bad.write_bytes(mangle(p.read_bytes()))
    with pytest.raises(FormatError) as ei:
        read_frames_bin(bad)
    assert needle in str(ei.value)


def test_read_dataset_dispatch(tmp_path, rng):
    frames = DatasetFrames(
        data=rng.normal(0, 1, (2, 1, 1, 3, 3)).astype("<f4").astype(float),
        labels=np.array([0, 1], dtype=np.uint8))
    p = tmp_path / "d.spkf"
    write_frames_bin(p, frames)
    assert read_dataset(p).count == 2
    with pytest.raises(ValidationError):
        read_dataset(tmp_path / "images.idx")  # IDX needs labels


# -- packing -----------------------------------------------------------------

def test_pack_frames_replicates_static_input(rng):
    sample = rng.normal(0, 1, (1, 2, 3, 3))
    out = pack_frames(sample, 4, 32)
    assert out.shape == (4, 32)
    for t in range(4):
        assert np.array_equal(out[t, :18], sample[0].reshape(-1))
        assert np.all(out[t, 18:] == 0)


def test_pack_frames_exact_timesteps(rng):
    sample = rng.normal(0, 1, (3, 1, 2, 2))
    out = pack_frames(sample, 3, 8)
    assert np.array_equal(out[:, :4], sample.reshape(3, 4))


def test_pack_frames_channel_major_order():
    sample = np.arange(2 * 2 * 2, dtype=float).reshape(1, 2, 2, 2)
    out = pack_frames(sample, 1, 16)
    # slot order: channel 0 row-major, then channel 1
    assert out[0, :8].tolist() == list(range(8))


def test_pack_frames_errors(rng):
    with pytest.raises(ValidationError):
        pack_frames(rng.normal(0, 1, (2, 1, 2, 2)), 3, 16)
    with pytest.raises(CapacityError):
        pack_frames(rng.normal(0, 1, (1, 1, 8, 8)), 1, 16)
    with pytest.raises(ValidationError):
        pack_frames(rng.normal(0, 1, (4, 4)), 1, 64)
