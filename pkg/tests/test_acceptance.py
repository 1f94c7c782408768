"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Criteria 4-8 share a session workspace (datasets, stage-1 backbone, stage-2
decoder, baseline arms across data fractions) built at default configuration.
Heavy: a full run trains eleven models; set VAM_ACCEPTANCE_DIR to cache the
artifacts between invocations.

Run with: pytest tests/test_acceptance.py -v -s
"""

import numpy as np
import pytest

from vam import env as world
from vam.config import RunConfig
from vam.dataset import generate_dataset, read_episode, run_expert_episode
from vam.evaluate import latency_probe
from vam.experiments import eval_command
from vam.flow import (
    LogitNormalTime,
    SqrtShiftedTime,
    cfm_loss,
    conditional_target,
    integrate,
    interpolate,
)
from vam.training import load_backbone, load_decoder, read_csv

from acceptance_util import get_workspace, report
from conftest import finite_difference_grad, rel_error


@pytest.fixture(scope="session")
def ws(tmp_path_factory):
    return get_workspace(tmp_path_factory)


def test_criterion_1_math_suite():
    rng = np.random.default_rng(0)
    x0, eps = rng.standard_normal((2, 16)), rng.standard_normal((2, 16))
    ok = True
    ok &= np.array_equal(interpolate(x0, eps, 0.0), x0)
    ok &= np.array_equal(interpolate(x0, eps, 1.0), eps)
    ok &= np.array_equal(conditional_target(x0, eps), eps - x0)
    ok &= cfm_loss(np.array([1.0, 1.0]), np.array([0.0, 0.0])) == 1.0

    c = rng.standard_normal(16)
    for n in (1, 3, 7):
        out = integrate(lambda x, t: c, eps[0], 1.0, 0.0, n)
        ok &= np.allclose(out, eps[0] - c, atol=1e-10)

    # Gaussian-to-Gaussian flow: Euler error halves when steps double
    m0, s0 = 1.5, 0.5

    def field(x, tau):
        mu = (1 - tau) * m0
        v = (1 - tau) ** 2 * s0**2 + tau**2
        return (tau - (1 - tau) * s0**2) * (x - mu) / v - m0

    x1 = np.array([0.7, -1.3, 0.1])
    exact = m0 + s0 * x1
    errors = [np.abs(integrate(field, x1, 1.0, 0.0, n) - exact).max()
              for n in (2, 4, 8, 16)]
    ratios = [a / b for a, b in zip(errors, errors[1:])]
    ok &= all(1.7 < r < 2.3 for r in ratios)
    assert report(1, "math suite", ok,
                  f"halving ratios {[f'{r:.2f}' for r in ratios]}")


def test_criterion_2_gradient_suite():
    from vam.autodiff import Tensor
    from vam.nn import (
        BilinearTimeCond, LayerNorm, Linear, Mlp, MultiheadAttention)
    from vam.video_model import DiTBlock

    rng = np.random.default_rng(1)
    worst = 0.0

    def check(module, x, extra=()):
        nonlocal worst
        proj = rng.standard_normal(module(Tensor(x)).shape)

        def loss_fn():
            return (module(Tensor(x)) * proj).sum()

        loss_fn().backward()
        for p in module.parameters():
            if p.grad is None:
                continue
            base = p.data

            def f(val, p=p):
                p.data = val
                try:
                    return float(loss_fn().data)
                finally:
                    p.data = base

            err = rel_error(p.grad, finite_difference_grad(f, base.copy()))
            worst = max(worst, err)
            assert err < 1e-4

    check(Linear(5, 4, rng, dtype=np.float64), rng.standard_normal((3, 5)))
    check(LayerNorm(6, dtype=np.float64), rng.standard_normal((2, 6)))
    check(Mlp(4, rng, dtype=np.float64), rng.standard_normal((2, 4)))
    check(MultiheadAttention(4, 2, rng, dtype=np.float64),
          rng.standard_normal((1, 5, 4)))

    block = DiTBlock(8, 2, 8, rng, dtype=np.float64)
    block.ada.proj.weight.data = rng.standard_normal(
        block.ada.proj.weight.data.shape) * 0.05
    lang = Tensor(rng.standard_normal((1, 2, 8)))
    cond = Tensor(rng.standard_normal((1, 8)))

    class BlockWrap:
        def __call__(self, x):
            return block(x, lang, cond)

        def parameters(self):
            return block.parameters()

    check(BlockWrap(), rng.standard_normal((1, 4, 8)))

    bc = BilinearTimeCond(6, 4, rank=2, rng=rng, dtype=np.float64)

    class CondWrap:
        def __call__(self, x):
            return bc(np.array([0.3, 0.7]), np.array([0.6, 0.2])) + x * 0.0

        def parameters(self):
            return bc.parameters()

    check(CondWrap(), np.zeros((2, 4)))
    assert report(2, "gradient suite", True,
                  f"max relative error {worst:.2e} (tolerance 1e-4)")


def test_criterion_3_time_samplers(ws):
    dist = SqrtShiftedTime(0.001)
    samples = dist.sample(np.random.default_rng(7), 100_000)
    mean_ok = abs(samples.mean() - 0.6004) < 0.01
    bounds_ok = samples.min() >= 0.001 and samples.max() <= 1.0

    # recorded draws from the real stage-2 run
    ws.study()
    _, rows = read_csv(ws.root / "study" / "vam_f1" / "tau_draws.csv")
    taus = np.array([[float(a), float(b)] for a, b in rows])
    assert len(taus) >= 10_000
    rho = float(np.corrcoef(taus[:10_000, 0], taus[:10_000, 1])[0, 1])
    indep_ok = abs(rho) < 0.02
    ok = mean_ok and bounds_ok and indep_ok
    assert report(3, "time samplers", ok,
                  f"mean {samples.mean():.4f} (target 0.6004 +- 0.01), "
                  f"stage-2 corr(tau_v, tau_a) = {rho:+.4f}")


def test_criterion_4_oracle_study(ws):
    ws.oracle()
    _, rows = read_csv(ws.root / "oracle" / "oracle_eval_report.csv")
    oracle_sr = float([r for r in rows if r[0] == "avg"][0][3])

    ws.sweep()
    _, srows = read_csv(ws.root / "sweep" / "sweep_tau.csv")
    gen_by_tau = {float(r[0]): float(r[2]) for r in srows if r[1] == "avg"}
    best_tau, best_gen = max(gen_by_tau.items(), key=lambda kv: kv[1])

    ok = oracle_sr >= 95.0 and best_gen >= 60.0 and best_gen < oracle_sr
    assert report(4, "oracle study", ok,
                  f"teacher-forced SR {oracle_sr:.1f}% (>= 95), generative "
                  f"best {best_gen:.1f}% at tau_v={best_tau:g} (>= 60, < oracle)")


def test_criterion_5_mse_curve(ws):
    ws.oracle()
    _, rows = read_csv(ws.root / "oracle" / "oracle_mse_curve.csv")
    curve = [(float(t), float(m)) for t, m, _ in rows]
    mses = [m for _, m in curve]
    interior = mses[1:-1]
    argmin = int(np.argmin(mses))
    interior_min = min(interior)
    ok = (0 < argmin < len(mses) - 1
          and interior_min < 0.95 * mses[0]
          and interior_min < 0.95 * mses[-1])
    assert report(5, "reconstruction-error curve", ok,
                  f"min {interior_min:.4f} at tau_v={curve[argmin][0]:.3f} "
                  f"(interior), endpoints {mses[0]:.4f} / {mses[-1]:.4f}, "
                  f"margins {mses[0] / interior_min - 1:.1%} / "
                  f"{mses[-1] / interior_min - 1:.1%} (need >= 5%)")


def test_criterion_6_fast_path(ws):
    cfg = RunConfig()
    backbone = load_backbone(cfg, ws.stage1())
    backbone.freeze()
    decoder = load_decoder(cfg, ws.decoder())
    decoder.freeze()
    probe = latency_probe(backbone, decoder, world.FAMILY_B[0], cfg.eval,
                          cfg.seed, tau_values=(1.0, 0.0), repeats=3)
    t_fast, forwards_fast = probe[1.0]
    t_full, forwards_full = probe[0.0]
    ok = (forwards_fast == 1 and forwards_full == 11
          and t_fast <= 0.25 * t_full)
    assert report(6, "fast path", ok,
                  f"forwards/chunk {forwards_fast} vs {forwards_full}, "
                  f"latency {t_fast * 1e3:.0f} ms vs {t_full * 1e3:.0f} ms "
                  f"(ratio {t_fast / t_full:.3f}, need <= 0.25)")


def _efficiency_rows(ws):
    _, rows = read_csv(ws.study() / "sample_efficiency.csv")
    out = {}
    for arm, f, sr, _ in rows:
        out[(arm, float(f))] = float(sr)
    return out


def test_criterion_7_sample_efficiency(ws):
    srs = _efficiency_rows(ws)
    cfg = RunConfig()
    fractions = list(cfg.sweep.fractions)
    baseline_full = srs[("baseline", 1.0)]
    dominance = all(srs[("vam", f)] >= srs[("baseline", f)] for f in fractions)
    tenth = srs[("vam", 0.1)] >= baseline_full
    ratio = next((1.0 / f for f in sorted(fractions)
                  if srs[("vam", f)] >= baseline_full), None)
    ok = dominance and tenth
    detail = ", ".join(
        f"f={f:g}: vam {srs[('vam', f)]:.0f} / base {srs[('baseline', f)]:.0f}"
        for f in fractions)
    assert report(7, "sample efficiency", ok,
                  f"{detail}; realized efficiency ratio {ratio}x")


def test_criterion_8_convergence(ws):
    from vam.experiments import convergence_study

    out = ws.root / "convergence"
    summary = out / "convergence_summary.csv"
    if not summary.exists():
        _, data_b, _ = ws.datasets()
        convergence_study(ws.fresh_cfg(), data_b, ws.stage1(),
                          ws.periodic_checkpoints("vam"),
                          ws.periodic_checkpoints("baseline"), out)
    _, rows = read_csv(summary)
    steps = {arm: float(s) for arm, s, _ in rows}
    finals = {arm: float(sr) for arm, _, sr in rows}
    ok = steps["vam"] <= 0.5 * steps["baseline"]
    assert report(8, "convergence speed", ok,
                  f"steps to 90% of final SR: vam {steps['vam']:.0f} "
                  f"(final {finals['vam']:.0f}%), baseline "
                  f"{steps['baseline']:.0f} (final {finals['baseline']:.0f}%), "
                  f"ratio {steps['vam'] / steps['baseline']:.2f} (need <= 0.5)")


def test_criterion_9_determinism_and_formats(ws, tmp_path):
    cfg = RunConfig()
    # dataset regeneration is bit-identical
    a_dir, b_dir = tmp_path / "a", tmp_path / "b"
    for d in (a_dir, b_dir):
        generate_dataset(world.FAMILY_B[:2], 2, seed=123, out_dir=d)
    gen_ok = all((a_dir / p.name).read_bytes() == p.read_bytes()
                 for p in sorted(b_dir.iterdir()))

    # .epz round-trip and replay consistency
    task = world.FAMILY_B[2]
    rec = run_expert_episode(task, seed=5)
    from vam.dataset import write_episode
    p1 = tmp_path / "ep.epz"
    write_episode(p1, rec)
    back = read_episode(p1)
    p2 = tmp_path / "ep2.epz"
    write_episode(p2, back)
    epz_ok = (p1.read_bytes() == p2.read_bytes()
              and np.array_equal(back.frames, rec.frames))
    state = world.reset(task, rec.seed)
    stream = [state.proprio().astype(np.float32)]
    for a in rec.actions:
        state = world.step(state, a.astype(np.float64))
        stream.append(state.proprio().astype(np.float32))
    replay_ok = np.array_equal(np.stack(stream), rec.proprio)

    # checkpoint round-trip is bit-exact
    from vam.checkpoint import load_checkpoint, save_checkpoint
    arrays = [("w", np.random.default_rng(0).standard_normal((7, 3)).astype(np.float32))]
    c1, c2 = tmp_path / "c1.ckpt", tmp_path / "c2.ckpt"
    save_checkpoint(c1, arrays)
    save_checkpoint(c2, [(k, v) for k, v in load_checkpoint(c1).items()])
    ckpt_ok = c1.read_bytes() == c2.read_bytes()

    # a repeated command yields bit-identical CSV
    cfg.eval.n_rollouts = 4
    e1, e2 = tmp_path / "e1", tmp_path / "e2"
    for out in (e1, e2):
        eval_command(cfg, ws.stage1(), ws.decoder(), out, tau_v=1.0,
                     log=lambda *_: None)
    eval_ok = ((e1 / "eval_report.csv").read_bytes()
               == (e2 / "eval_report.csv").read_bytes())

    ok = gen_ok and epz_ok and replay_ok and ckpt_ok and eval_ok
    assert report(9, "determinism and formats", ok,
                  f"regen {gen_ok}, epz {epz_ok}, replay {replay_ok}, "
                  f"ckpt {ckpt_ok}, eval rerun {eval_ok}")
