import numpy as np
import pytest

from strokegen import checkpoint as CK
from strokegen import config as C
from strokegen import training as TR
from strokegen.generative import build_model
from tests.conftest import tiny_config


def test_config_roundtrip_dumps_loads():
    cfg = C.RunConfig()
    cfg.seed = 7
    cfg.model.t_max = 4
    cfg.train.beta = 2.5
    cfg.flags.rho_rsd = True
    cfg.synthetic.stroke_counts = [1, 2, 3]
    text = C.dumps(cfg)
    back = C.loads(text)
    assert C.dumps(back) == text
    assert back.model.t_max == 4 and back.train.beta == 2.5 and back.flags.rho_rsd
    assert back.synthetic.stroke_counts == [1, 2, 3]


def test_config_defaults_match_reference_constants():
    cfg = C.RunConfig()
    assert cfg.model.t_max == 6
    assert cfg.model.control_points == 5
    assert cfg.model.curve_samples == 100
    assert cfg.model.mixture_components == 10
    assert cfg.model.glimpse_size == 20
    assert cfg.train.beta == 4.0
    assert cfg.train.lr_nvil == 1e-3 and cfg.train.lr_rest == 1e-4
    assert cfg.train.batch_size == 64
    assert cfg.model.image_size == 50


def test_config_rejects_unknown_keys():
    with pytest.raises(C.ConfigError, match="unknown key"):
        C.loads("[model]\nbogus = 3\n")
    with pytest.raises(C.ConfigError, match="unknown section"):
        C.loads("[nope]\nx = 1\n")
    with pytest.raises(C.ConfigError, match="unknown key"):
        C.loads("rootbogus = 1\n")


def test_config_rejects_bad_values():
    with pytest.raises(C.ConfigError):
        C.loads("[model]\nt_max = 0\n")
    with pytest.raises(C.ConfigError):
        C.loads("[train]\nbeta = -1.0\n")
    with pytest.raises(C.ConfigError):
        C.loads("[data]\nkind = \"weird\"\n")
    with pytest.raises(C.ConfigError, match="cannot parse"):
        C.loads("[model]\nt_max = ???\n")


def test_config_comments_and_type_coercion():
    cfg = C.loads("# a comment\n[train]\nbeta = 2  # int to float\nsteps = 5\n")
    assert cfg.train.beta == 2.0 and isinstance(cfg.train.beta, float)
    assert cfg.train.steps == 5


def test_apply_overrides():
    cfg = C.RunConfig()
    C.apply_overrides(cfg, ["model.t_max=3", "flags.eg_ablation=true", "seed=9"])
    assert cfg.model.t_max == 3 and cfg.flags.eg_ablation and cfg.seed == 9
    with pytest.raises(C.ConfigError):
        C.apply_overrides(cfg, ["model.nope=1"])


def test_data_root_env(monkeypatch):
    monkeypatch.setenv("DOOD_DATA_DIR", "/some/where")
    assert C.data_root() == "/some/where"
    monkeypatch.delenv("DOOD_DATA_DIR")
    assert C.data_root().endswith("data")


def _build_everything(seed=0):
    cfg = tiny_config()
    gen, rec = build_model(cfg, np.random.default_rng(seed))
    bl = TR.BaselineNet(cfg, np.random.default_rng(seed + 1))
    adam = TR.make_optimizer(gen, rec, bl, cfg)
    rng = np.random.default_rng(seed + 2)
    return cfg, gen, rec, bl, adam, rng


def test_checkpoint_roundtrip_byte_identical(tmp_path):
    cfg, gen, rec, bl, adam, rng = _build_everything()
    rng.random(17)  # advance rng so the state is nontrivial
    p1 = tmp_path / "a.bin"
    CK.save(p1, cfg, gen, rec, bl, adam, rng, step=123)
    state = CK.load(p1)
    assert state.step == 123
    p2 = tmp_path / "b.bin"
    with open(p2, "wb") as fh:
        fh.write(CK.dumps_state(state))
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_restores_parameters_and_rng(tmp_path):
    cfg, gen, rec, bl, adam, rng = _build_everything()
    for _, p in gen.named_parameters():
        p.data = p.data + 0.01  # make params distinctive
    draws_before = rng.random(3)
    path = tmp_path / "c.bin"
    CK.save(path, cfg, gen, rec, bl, adam, rng, step=5)
    after_save = rng.random(3)

    cfg2, gen2, rec2, bl2, adam2, rng2 = _build_everything(seed=99)
    state = CK.load(path)
    CK.restore_model(state, gen2, rec2, bl2, adam2)
    for (n1, p1), (n2, p2) in zip(gen.named_parameters(), gen2.named_parameters()):
        assert n1 == n2
        np.testing.assert_array_equal(p1.data, p2.data)
    restored_rng = state.rng()
    np.testing.assert_array_equal(restored_rng.random(3), after_save)


def test_checkpoint_rejects_corruption(tmp_path):
    cfg, gen, rec, bl, adam, rng = _build_everything()
    path = tmp_path / "d.bin"
    CK.save(path, cfg, gen, rec, bl, adam, rng, step=1)
    data = bytearray(path.read_bytes())
    data[:4] = b"XXXX"
    with pytest.raises(CK.CheckpointError, match="magic"):
        CK.loads_state(bytes(data))
    good = path.read_bytes()
    with pytest.raises(CK.CheckpointError, match="truncated"):
        CK.loads_state(good[: len(good) - 10])


def test_checkpoint_missing_param(tmp_path):
    cfg, gen, rec, bl, adam, rng = _build_everything()
    path = tmp_path / "e.bin"
    CK.save(path, cfg, gen, rec, None, None, rng, step=1)
    state = CK.load(path)
    cfg2, gen2, rec2, bl2, adam2, _ = _build_everything(seed=5)
    with pytest.raises(CK.CheckpointError, match="missing parameter"):
        CK.restore_model(state, gen2, rec2, bl2, adam2)


def test_build_from_checkpoint_runs_inference(tmp_path):
    cfg, gen, rec, bl, adam, rng = _build_everything()
    path = tmp_path / "f.bin"
    CK.save(path, cfg, gen, rec, bl, adam, rng, step=2)
    cfg2, gen2, rec2, _ = CK.build_from_checkpoint(path)
    x = np.clip(np.random.default_rng(1).uniform(0, 1, size=(2, 50, 50)), 0, 1).astype(np.float32)
    r1 = rec.infer(x, np.random.default_rng(3))
    r2 = rec2.infer(x, np.random.default_rng(3))
    np.testing.assert_array_equal(r1.recon.data, r2.recon.data)


def test_resume_reproduces_next_step_loss(tmp_path):
    from strokegen import data as D
    from strokegen.config import SyntheticConfig

    cfg = tiny_config(model__t_max=2, train__steps=6, train__batch_size=4)
    cfg.train.checkpoint_every = 3
    cfg.train.metrics_every = 1
    cfg.synthetic = SyntheticConfig(n_images=16, seed=2)
    ds, _, _ = D.make_synthetic(cfg.synthetic, curve_samples=cfg.model.curve_samples)

    full = TR.train(ds, cfg, out_dir=str(tmp_path / "full"))
    resumed = TR.train(ds, cfg, out_dir=str(tmp_path / "resumed"), resume_from=str(tmp_path / "full" / "ckpt_0000003.bin"))
    full_tail = [m for m in full.metrics if m["step"] > 3]
    for a, b in zip(full_tail, resumed.metrics):
        assert a == b
