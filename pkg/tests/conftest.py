import pytest

from lang2face.config import Config
from lang2face.lvsn import freeze
from lang2face.renderer import generate_dataset
from lang2face.trainer import build_lvsn, save_lvsn


def tiny_config(**kw) -> Config:
    values = dict(base_resolution=8, word_dim=16, embed_dim=8, face_channels=16, level_channels=(8, 8, 8),
                  res_blocks=1, critic_channels=4, vse_channels=(4, 8, 8, 8), batch_size=4, steps=6,
                  checkpoint_every=3, pretrain_steps=4, pretrain_batch_size=4)
    values.update(kw)
    return Config(**values)


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    return generate_dataset(tmp_path_factory.mktemp("tiny_ds"), n_identities=5, samples_per_identity=8,
                            seed=3, size=32)


@pytest.fixture(scope="session")
def tiny_lvsn_dir(tmp_path_factory):
    """An untrained, frozen encoder pair; enough for contract tests."""
    cfg = tiny_config()
    lv = build_lvsn(cfg)
    freeze(lv.text)
    freeze(lv.visual)
    out = tmp_path_factory.mktemp("tiny_lvsn")
    save_lvsn(lv, cfg, out)
    return out
