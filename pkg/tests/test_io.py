import numpy as np
import pytest

from dcsnet import checkpoint, data
from dcsnet import config as cfgmod
from dcsnet.geometry import PointCloud


# ----------------------------------------------------------------- cloud I/O

def test_cloud_roundtrip_exact(tmp_path, rng):
    cloud = PointCloud(rng.normal(size=(64, 3)), label=3, id="probe_0001")
    path = tmp_path / "c.xyz"
    data.write_cloud(path, cloud)
    back = data.read_cloud(path)
    # repr-formatted float64 survives the round trip bit-exactly
    assert np.array_equal(back.points, cloud.points)
    assert back.label == 3 and back.id == "probe_0001"


def test_read_cloud_minimal():
    import io, os, tempfile
    with tempfile.TemporaryDirectory() as d:
        p = os.path.join(d, "m.xyz")
        with open(p, "w") as fh:
            fh.write("0 0 0\n1 0 0\n")
        cloud = data.read_cloud(p)
        assert len(cloud) == 2
        assert cloud.label is None


def test_read_cloud_errors_name_line(tmp_path):
    p = tmp_path / "bad.xyz"
    p.write_text("1 2\n")
    with pytest.raises(ValueError, match="bad.xyz:1"):
        data.read_cloud(str(p))
    p.write_text("0 0 0\n1 x 2\n")
    with pytest.raises(ValueError, match=":2.*malformed"):
        data.read_cloud(str(p))
    p.write_text("0 0 inf\n")
    with pytest.raises(ValueError, match="non-finite"):
        data.read_cloud(str(p))
    p.write_text("# only a comment\n")
    with pytest.raises(ValueError, match="no points"):
        data.read_cloud(str(p))


# ------------------------------------------------------------------- dataset

def test_generate_dataset_deterministic(tmp_path):
    specs = [data.ShapeSpec("sphere", points=32), data.ShapeSpec("cube", points=32)]
    a, b = tmp_path / "a", tmp_path / "b"
    data.generate_dataset(specs, 3, 7, str(a))
    data.generate_dataset(specs, 3, 7, str(b))
    for f in sorted(p.name for p in a.iterdir()):
        assert (a / f).read_bytes() == (b / f).read_bytes()
    assert len(list(a.glob("*.xyz"))) == 6


def test_sphere_family_unit_norm_pre_jitter():
    gen = np.random.default_rng(0)
    pts = data._surface_points("sphere", 256, gen)
    assert np.allclose(np.linalg.norm(pts, axis=1), 1.0, atol=1e-9)


def test_all_families_generate_valid_clouds(rng):
    for fam in data.FAMILIES:
        cloud = data.make_cloud(data.ShapeSpec(fam, points=64), rng, 0, f"{fam}_x")
        assert cloud.points.shape == (64, 3)
        assert np.isfinite(cloud.points).all()


def test_shape_spec_validation():
    with pytest.raises(ValueError):
        data.ShapeSpec("pyramid")
    with pytest.raises(ValueError):
        data.ShapeSpec("sphere", points=16)


def test_load_dataset_labels_and_normalization(tiny_dataset_dir, cfg):
    clouds = data.load_dataset(tiny_dataset_dir)
    assert len(clouds) == 5 * cfg.data.samples_per_class
    assert sorted({c.label for c in clouds}) == [0, 1, 2, 3, 4]
    for c in clouds[:5]:
        assert np.linalg.norm(c.points, axis=1).max() == pytest.approx(1.0)
    with pytest.raises(FileNotFoundError):
        data.load_dataset(tiny_dataset_dir + "/nope")


# --------------------------------------------------------------- checkpoints

def test_checkpoint_roundtrip_bit_exact_after_snap(tmp_path, rng):
    blocks = {
        "w": checkpoint.snap_array(rng.normal(size=(4, 5))),
        "b": checkpoint.snap_array(rng.normal(size=(5,))),
        "scalar": checkpoint.snap_array(np.array(2.5)),
    }
    state = {"epoch": 7, "m": [rng.normal(size=(4, 5))], "nested": {"x": 1.5}}
    path = tmp_path / "c.ckpt"
    checkpoint.write_checkpoint(str(path), blocks, state)
    back, st = checkpoint.read_checkpoint(str(path))
    for k in blocks:
        assert np.array_equal(back[k], blocks[k]), k
    assert st["epoch"] == 7
    assert np.array_equal(st["m"][0], state["m"][0])  # float64 blob is exact
    assert st["nested"]["x"] == 1.5


def test_checkpoint_bad_magic_and_version(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(checkpoint.CheckpointError, match="magic"):
        checkpoint.read_checkpoint(str(p))
    checkpoint.write_checkpoint(str(p), {}, {})
    raw = bytearray(p.read_bytes())
    raw[4] = 99  # bump the version field
    p.write_bytes(bytes(raw))
    with pytest.raises(checkpoint.CheckpointError, match="version"):
        checkpoint.read_checkpoint(str(p))
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.read_checkpoint(str(tmp_path / "missing.ckpt"))


def test_checkpoint_truncation_rejected(tmp_path, rng):
    p = tmp_path / "t.ckpt"
    checkpoint.write_checkpoint(str(p), {"w": rng.normal(size=(3, 3))}, {})
    p.write_bytes(p.read_bytes()[:20])
    with pytest.raises(checkpoint.CheckpointError, match="corrupt"):
        checkpoint.read_checkpoint(str(p))


def test_snap_is_idempotent(rng):
    a = rng.normal(size=(10,))
    once = checkpoint.snap_array(a)
    assert np.array_equal(once, checkpoint.snap_array(once))


# -------------------------------------------------------------------- config

def test_config_defaults_complete():
    cfg = cfgmod.RunConfig()
    assert cfg.data.points == 512
    assert cfg.sampler.group_count == 32
    assert cfg.stage3.epochs == 100
    assert cfg.finetune.holdout_fraction == 0.2


def test_parse_config_roundtrip(tmp_path):
    cfg = cfgmod.RunConfig()
    cfg.stage1.epochs = 17
    cfg.sampler.gumbel_temperature = 0.7
    cfg.data.families = "sphere,cube"
    p = tmp_path / "run.cfg"
    p.write_text(cfgmod.dump_config(cfg))
    back = cfgmod.parse_config(str(p))
    assert back.stage1.epochs == 17
    assert back.sampler.gumbel_temperature == 0.7
    assert back.data.family_list() == ["sphere", "cube"]


def test_parse_config_partial_file_keeps_defaults(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("[stage1]\nepochs = 3\n# comment\n\n[fewshot]\nway = 2\n")
    cfg = cfgmod.parse_config(str(p))
    assert cfg.stage1.epochs == 3
    assert cfg.fewshot.way == 2
    assert cfg.stage2.epochs == 200  # untouched default


@pytest.mark.parametrize("text,match", [
    ("[nosuch]\n", "unknown section"),
    ("[stage1]\nnope = 3\n", "unknown key"),
    ("epochs = 3\n", "outside any"),
    ("[stage1]\nepochs\n", "key = value"),
    ("[stage1]\nepochs = many\n", "expected int"),
    ("[sampler]\ngroup_count = 1\n", "group_count"),
])
def test_parse_config_rejections_name_location(tmp_path, text, match):
    p = tmp_path / "bad.cfg"
    p.write_text(text)
    with pytest.raises(cfgmod.ConfigError, match=match):
        cfgmod.parse_config(str(p))
