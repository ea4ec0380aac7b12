import numpy as np
import pytest

from dcsnet import config as cfgmod
from dcsnet import data


def tiny_config() -> cfgmod.RunConfig:
    """A configuration small enough for second-scale pipeline tests."""
    cfg = cfgmod.RunConfig()
    cfg.data.samples_per_class = 6
    cfg.data.points = 64
    cfg.sampler.group_count = 8
    cfg.sampler.points_per_group = 8
    cfg.sampler.latent_width = 16
    cfg.sampler.hidden_width = 16
    cfg.sampler.decoder_width = 32
    cfg.backbone.embed_width = 16
    cfg.backbone.encoder_blocks = 1
    cfg.backbone.heads = 2
    for stage in (cfg.stage1, cfg.stage2, cfg.stage3, cfg.finetune):
        stage.epochs = 2
        stage.warmup_epochs = 1
        stage.batch_size = 4
    cfg.fewshot.way = 2
    cfg.fewshot.shot = 2
    cfg.fewshot.query_per_class = 2
    cfg.fewshot.episodes = 2
    cfg.fewshot.head_epochs = 5
    return cfg


@pytest.fixture
def cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    cfg = tiny_config()
    out = tmp_path_factory.mktemp("tinydata")
    specs = [data.ShapeSpec(f, points=cfg.data.points) for f in data.FAMILIES]
    data.generate_dataset(specs, cfg.data.samples_per_class, 5, str(out))
    return str(out)


@pytest.fixture
def tiny_clouds(tiny_dataset_dir):
    return data.load_dataset(tiny_dataset_dir)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
