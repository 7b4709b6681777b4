"""The two-stage cascade: config validation, forward contract, deterministic
builds, the parameter-count oracle, and the ablation switches."""

import numpy as np
import pytest

from spineseg.network import (DESK_CHANNELS, PAPER_CHANNELS, Model,
                              ModelConfig, build_model)
from spineseg.tensor import Tape, Tensor
from spineseg.losses import total_loss

from conftest import model_params_oracle


def _img(cfg, seed=0, n=1):
    rng = np.random.default_rng(seed)
    return Tensor(rng.random((n, 1, cfg.input_size, cfg.input_size),
                             dtype=np.float64).astype(np.float32))


# ---------------------------------------------------------------------------
# config validation


def test_presets():
    desk = ModelConfig.desk()
    assert desk.channels == DESK_CHANNELS and desk.input_size == 64
    paper = ModelConfig.paper()
    assert paper.channels == PAPER_CHANNELS and paper.input_size == 512
    assert ModelConfig.paper(input_size=128).input_size == 128


@pytest.mark.parametrize("bad", [
    dict(levels=1, channels=(4,), recurrence=(1,)),
    dict(channels=(4, 4, 4)),                      # wrong length
    dict(recurrence=(1, 1)),                       # wrong length
    dict(input_size=60),                           # not divisible by 8
    dict(channels=(4, 4, 4, 5)),                   # odd bottleneck + scse
    dict(dropout_rate=1.0),
    dict(recurrence=(1, 1, 0, 1)),
])
def test_invalid_configs_rejected(bad):
    with pytest.raises(ValueError):
        ModelConfig(**bad).validate()


def test_odd_bottleneck_allowed_without_scse():
    ModelConfig(channels=(4, 4, 4, 5), use_scse=False).validate()


def test_with_overrides_returns_new_config():
    a = ModelConfig.desk()
    b = a.with_overrides(dropout_rate=0.0)
    assert a.dropout_rate == 0.2 and b.dropout_rate == 0.0


# ---------------------------------------------------------------------------
# forward contract


def test_forward_returns_two_probability_maps(tiny_cfg):
    model = build_model(tiny_cfg, np.float32)
    pc, pf = model.forward(_img(tiny_cfg), mode="eval")
    s = tiny_cfg.input_size
    for p in (pc, pf):
        assert p.data.shape == (1, 1, s, s)
        assert p.data.min() > 0.0 and p.data.max() < 1.0  # open interval


def test_forward_rejects_wrong_input_shape(tiny_cfg):
    model = build_model(tiny_cfg, np.float32)
    with pytest.raises(ValueError, match="expected input"):
        model.forward(Tensor(np.zeros((1, 1, 8, 8), np.float32)), mode="eval")
    with pytest.raises(ValueError):
        model.forward(Tensor(np.zeros((1, 2, 16, 16), np.float32)), mode="eval")


def test_train_mode_with_dropout_needs_rng(tiny_cfg):
    cfg = tiny_cfg.with_overrides(dropout_rate=0.5)
    model = build_model(cfg, np.float32)
    with pytest.raises(ValueError, match="rng"):
        model.forward(_img(cfg), mode="train")
    model.forward(_img(cfg), mode="train", rng=np.random.default_rng(0))


def test_eval_forward_is_deterministic(tiny_cfg):
    model = build_model(tiny_cfg, np.float32)
    x = _img(tiny_cfg)
    a = model.forward(x, mode="eval")[1].data
    b = model.forward(x, mode="eval")[1].data
    np.testing.assert_array_equal(a, b)


def test_build_is_deterministic(tiny_cfg):
    a = build_model(tiny_cfg, np.float32)
    b = build_model(tiny_cfg, np.float32)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        np.testing.assert_array_equal(pa.data, pb.data)


def test_different_seed_different_weights(tiny_cfg):
    a = build_model(tiny_cfg, np.float32)
    b = build_model(tiny_cfg.with_overrides(seed=99), np.float32)
    diffs = [not np.array_equal(pa.data, pb.data)
             for (_, pa), (_, pb) in zip(a.named_parameters(),
                                         b.named_parameters())
             if pa.data.size > 2]
    assert any(diffs)


def test_parameter_names_unique_and_tagged(tiny_cfg):
    model = build_model(tiny_cfg, np.float32)
    names = [n for n, _ in model.named_parameters()]
    assert len(names) == len(set(names))
    assert all(p.name == n for n, p in model.named_parameters())
    assert any(n.startswith("coarse.") for n in names)
    assert any(n.startswith("fine.psi.") for n in names)


# ---------------------------------------------------------------------------
# gradient plumbing through the whole stack


def test_every_parameter_receives_gradient(tiny_cfg):
    model = build_model(tiny_cfg, np.float64)
    x = Tensor(np.random.default_rng(0).random((1, 1, 16, 16)))
    y = Tensor((np.random.default_rng(1).random((1, 1, 16, 16)) < 0.4)
               .astype(np.float64))
    with Tape() as tape:
        pc, pf = model.forward(x, mode="train")
        tape.backward(total_loss(pc, pf, y))
    missing = [n for n, p in model.named_parameters() if p.grad is None]
    assert not missing, missing
    dead = [n for n, p in model.named_parameters()
            if not np.any(p.grad) and p.data.size > 4]
    # batchnorm betas of dead-relu channels aside, weights must all be live
    assert not [n for n in dead if n.endswith(".weight")], dead


def test_zero_grad_clears_everything(tiny_cfg):
    model = build_model(tiny_cfg, np.float64)
    x = Tensor(np.random.default_rng(0).random((1, 1, 16, 16)))
    with Tape() as tape:
        pc, pf = model.forward(x, mode="train")
        tape.backward(total_loss(pc, pf, Tensor(np.zeros((1, 1, 16, 16)))))
    model.zero_grad()
    assert all(p.grad is None for p in model.parameters())


# ---------------------------------------------------------------------------
# counting oracle


@pytest.mark.parametrize("kw", [
    {},
    dict(use_r2jump=False),
    dict(use_inception=False),
    dict(use_mcskip=False),
    dict(use_scse=False),
    dict(use_r2jump=False, use_inception=False, use_mcskip=False,
         use_scse=False),
    dict(channels=(8, 16, 32, 64)),
])
def test_count_matches_oracle(kw):
    kw = dict(kw)
    cfg = ModelConfig(channels=kw.pop("channels", (4, 4, 6, 6)),
                      input_size=16, **kw)
    model = build_model(cfg, np.float32)
    assert model.count_parameters() == model_params_oracle(cfg)


def test_desk_preset_parameter_count():
    assert build_model(ModelConfig.desk(), np.float32).count_parameters() \
        == model_params_oracle(ModelConfig.desk())


def test_recurrence_schedule_does_not_change_count(tiny_cfg):
    counts = set()
    for rec in ((1, 1, 1, 1), (4, 3, 2, 1), (5, 4, 3, 2)):
        cfg = tiny_cfg.with_overrides(recurrence=rec)
        counts.add(build_model(cfg, np.float32).count_parameters())
    assert len(counts) == 1


# ---------------------------------------------------------------------------
# ablation switches


def test_each_switch_changes_structure(tiny_cfg):
    full = build_model(tiny_cfg, np.float32)
    for flag in ("use_r2jump", "use_inception", "use_mcskip", "use_scse"):
        cut = build_model(tiny_cfg.with_overrides(**{flag: False}), np.float32)
        assert cut.count_parameters() < full.count_parameters(), flag
        pc, pf = cut.forward(_img(tiny_cfg), mode="eval")
        assert pf.data.shape == (1, 1, 16, 16)


def test_mcskip_taps_exist_only_when_enabled(tiny_cfg):
    on = build_model(tiny_cfg, np.float32)
    off = build_model(tiny_cfg.with_overrides(use_mcskip=False), np.float32)
    assert on.fine.psi and not off.fine.psi
    # taps reach at most two levels down from each injection level
    assert set(on.fine.psi) == {(k, i) for i in range(4)
                                for k in range(i, min(i + 3, 4))}


def test_coarse_stage_never_owns_fine_only_parts(tiny_cfg):
    model = build_model(tiny_cfg, np.float32)
    assert not model.coarse.psi and model.coarse.scse is None
    names = [n for n, _ in model.named_parameters()]
    assert not any(n.startswith("coarse.scse") or n.startswith("coarse.psi")
                   for n in names)
