import csv
import io

import numpy as np
import pytest
import torch

from mhvae.data import load_manifest, read_png16
from mhvae.errors import CheckpointError, ContractError
from mhvae.hierarchy import HierarchySpec
from mhvae.objective import LossWeights
from mhvae.trainer import (
    CHECKPOINT_FORMAT,
    TrainConfig,
    Trainer,
    TrainingDiverged,
    _to_device,
    load_model,
    read_checkpoint,
    read_curves,
    resume,
    sample_prior,
    synthesize,
    synthesize_array,
    train,
)

from conftest import small_arch, small_spec


def make_config(data, out, **kw):
    base = dict(data_dir=str(data), out_dir=str(out), epochs=5, batch_size=8, seed=3, checkpoint_every=0,
                hierarchy=small_spec(4), arch=small_arch())
    base.update(kw)
    return TrainConfig(**base)


def curve_table(path):
    return {(e, s, t): v for e, s, t, v in read_curves(path)}


def test_config_validation(tiny_dataset, tmp_path):
    for bad in (dict(epochs=0), dict(batch_size=0), dict(lr_generator=0.0), dict(subset_sampling="some")):
        with pytest.raises(ContractError):
            make_config(tiny_dataset, tmp_path, **bad).validate()
    cfg = make_config(tiny_dataset, tmp_path)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_geometry_mismatch_with_dataset(tiny_dataset, tmp_path):
    cfg = make_config(tiny_dataset, tmp_path, arch=small_arch(32))
    with pytest.raises(ContractError, match="16x16"):
        Trainer(cfg)


@pytest.fixture(scope="module")
def short_run(tiny_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    ckpt = train(make_config(tiny_dataset, out, checkpoint_every=2))
    return out, ckpt


def test_run_outputs(short_run):
    out, ckpt = short_run
    assert ckpt == out / "last.pt"
    assert (out / "epoch_0002.pt").is_file() and (out / "epoch_0004.pt").is_file()
    state = read_checkpoint(ckpt)
    assert state["epoch"] == 5
    assert HierarchySpec.from_dict(state["config"]["hierarchy"]) == small_spec(4)
    for tensor in state["model"].values():
        assert torch.isfinite(tensor).all()


def test_curve_rows_and_totals(short_run):
    out, _ = short_run
    rows = read_curves(out / "losses.csv")
    table = curve_table(out / "losses.csv")
    assert len(table) == len(rows)  # one row per (epoch, subset, term)
    terms = {(s, t) for _, s, t, _ in rows}
    for e in range(5):
        assert all((e, s, t) in table for s, t in terms)
    scale = 1.0 / (16 * 16)
    for e in range(5):
        gan_w = 1.0 if e / 5 >= 0.8 else 0.0
        for subset in ("mr", "us", "mr+us"):
            parts = 100 * (table[(e, subset, "l1_mr")] + table[(e, subset, "l1_us")])
            parts += scale * sum(table[(e, subset, f"kl_{k}")] for k in range(4))
            parts += gan_w * (table[(e, subset, "gan_mr")] + table[(e, subset, "gan_us")])
            assert parts == pytest.approx(table[(e, subset, "total")], rel=1e-6)
        mean = np.mean([table[(e, s, "total")] for s in ("mr", "us", "mr+us")])
        assert mean == pytest.approx(table[(e, "all", "total")], rel=1e-6)


def test_gan_warmup_in_curves(short_run):
    out, _ = short_run
    table = curve_table(out / "losses.csv")
    for e in range(5):
        gan = [table[(e, s, f"gan_{m}")] for s in ("mr", "us", "mr+us") for m in ("mr", "us")]
        if e < 4:
            assert all(g == 0.0 for g in gan)
            assert table[(e, "all", "discriminator")] == 0.0
        else:
            assert all(g > 0 for g in gan)
            assert table[(e, "all", "discriminator")] > 0


def test_identical_seeds_identical_losses(tiny_dataset, tmp_path):
    a = train(make_config(tiny_dataset, tmp_path / "a", epochs=1))
    b = train(make_config(tiny_dataset, tmp_path / "b", epochs=1))
    ta, tb = curve_table(a.parent / "losses.csv"), curve_table(b.parent / "losses.csv")
    assert ta.keys() == tb.keys()
    for k in ta:
        assert ta[k] == pytest.approx(tb[k], rel=1e-5, abs=1e-12)


def test_resume_matches_uninterrupted(short_run, tiny_dataset, tmp_path):
    out, _ = short_run
    cfg = make_config(tiny_dataset, tmp_path / "r")
    train(cfg, stop_after=3)
    assert read_checkpoint(tmp_path / "r" / "last.pt")["epoch"] == 3
    resume(tmp_path / "r" / "last.pt")
    straight = curve_table(out / "losses.csv")
    resumed = curve_table(tmp_path / "r" / "losses.csv")
    assert straight.keys() == resumed.keys()
    for k in straight:
        assert resumed[k] == pytest.approx(straight[k], rel=1e-5, abs=1e-12), k


def _rewrite_container(path, mutate):
    container = torch.load(path, weights_only=True)
    mutate(container)
    torch.save(container, path)


def test_corrupted_checkpoint_refused(short_run, tmp_path):
    src, ckpt = short_run
    bad = tmp_path / "bad.pt"
    bad.write_bytes(ckpt.read_bytes())

    def flip(c):
        payload = bytearray(c["payload"])
        payload[len(payload) // 2] ^= 0xFF
        c["payload"] = bytes(payload)

    _rewrite_container(bad, flip)
    with pytest.raises(CheckpointError, match="digest"):
        resume(bad)
    junk = tmp_path / "junk.pt"
    junk.write_bytes(b"garbage")
    with pytest.raises(CheckpointError):
        read_checkpoint(junk)


def test_version_mismatch_refused(short_run, tmp_path):
    _, ckpt = short_run
    bad = tmp_path / "v.pt"
    bad.write_bytes(ckpt.read_bytes())
    _rewrite_container(bad, lambda c: c.update(version=99))
    with pytest.raises(CheckpointError, match="version"):
        load_model(bad)


def test_hierarchy_mismatch_refused(short_run, tiny_dataset, tmp_path):
    _, ckpt = short_run
    other = make_config(tiny_dataset, tmp_path, hierarchy=small_spec(3))
    with pytest.raises(CheckpointError, match="hierarchy"):
        resume(ckpt, 1, config=other)


def test_missing_checkpoint():
    with pytest.raises(FileNotFoundError):
        read_checkpoint("/nonexistent/x.pt")


def test_non_finite_loss_names_term(tiny_dataset, tmp_path):
    trainer = Trainer(make_config(tiny_dataset, tmp_path))
    with torch.no_grad():
        for p in trainer.model.decoders[1].parameters():
            p.fill_(float("nan"))
    with pytest.raises(TrainingDiverged, match="l1_us"):
        trainer.run_epoch()


def test_optimizer_partition(tiny_dataset, tmp_path):
    trainer = Trainer(make_config(tiny_dataset, tmp_path))
    gen_params = list(trainer.model.parameters())
    disc_params = list(trainer.discriminators.parameters())
    assert not {id(p) for p in gen_params} & {id(p) for p in disc_params}
    snap = lambda ps: [p.detach().clone() for p in ps]
    calls = []

    def wrap(opt, frozen, moving):
        inner = opt.step

        def step(*a, **k):
            before_f, before_m = snap(frozen), snap(moving)
            result = inner(*a, **k)
            assert all(torch.equal(x, p) for x, p in zip(before_f, frozen))
            assert any(not torch.equal(x, p) for x, p in zip(before_m, moving))
            calls.append(opt)
            return result

        opt.step = step

    wrap(trainer.opt_g, disc_params, gen_params)
    wrap(trainer.opt_d, gen_params, disc_params)
    batch = _to_device(trainer.data[:4], "cpu")
    trainer.step(batch, 0.5)
    assert calls == [trainer.opt_g]
    trainer.step(batch, 0.9)
    assert calls == [trainer.opt_g, trainer.opt_g, trainer.opt_d]


def test_random_subset_sampling(tiny_dataset, tmp_path):
    trainer = Trainer(make_config(tiny_dataset, tmp_path, subset_sampling="random"))
    seen = {trainer.subsets_for_step()[0] for _ in range(30)}
    assert seen == {(0,), (1,), (0, 1)}


def test_synthesize_and_sample(short_run, tiny_dataset, tmp_path):
    _, ckpt = short_run
    man = load_manifest(tiny_dataset).split("test")
    mr = read_png16(man.root / man.samples[0].files["mr"])
    a = synthesize(ckpt, [mr, None], 1, tmp_path / "a.png")
    b = synthesize(ckpt, [mr, None], 1, tmp_path / "b.png")
    assert a.read_bytes() == b.read_bytes()
    img = read_png16(a)
    assert img.shape == (16, 16) and img.dtype == np.uint16
    model, _, _ = load_model(ckpt)
    with pytest.raises(ContractError, match="sample"):
        synthesize_array(model, [None, None], 0)
    paths = sample_prior(ckpt, 2, 0, tmp_path / "s")
    assert len(paths) == 4 and all(p.is_file() for p in paths)
