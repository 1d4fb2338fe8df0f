"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s`.  The two training criteria
(9 and 10) build a shared 100-sample toy corpus once and train at desk scale;
they are the long poles (several minutes each on one CPU core).
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from bubbleonet import config as cf
from bubbleonet import datagen as dg
from bubbleonet import integrate as it
from bubbleonet import kernels as kn
from bubbleonet import network as nw
from bubbleonet import spectral as sp
from bubbleonet import training as tr
from bubbleonet.autodiff import Tensor
from bubbleonet.physics import (
    FluidParams,
    dimensionless_groups,
    groups_with_mach,
    make_scales,
    rp_rhs,
)

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"
TOY_CONFIG = str(CONFIG_DIR / "toy_rp.json")
TOY_TWOSTEP_CONFIG = str(CONFIG_DIR / "toy_twostep.json")


def ok(criterion, detail):
    print(f"\n[{criterion}] PASS  {detail}")


@pytest.fixture(scope="module")
def fluid():
    return FluidParams()


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    """Shared toy corpus + single-step training result (criteria 9, 10, 14)."""
    cfg = cf.load(TOY_CONFIG)
    d = str(tmp_path_factory.mktemp("toy_rp"))
    manifest, samples = dg.generate_corpus(cfg.doe, cfg.fluid)
    tr.split_profiles(manifest, cfg.split_ratio, cfg.seed)
    dg.write_dataset(manifest, samples, d)
    manifest, reader = dg.read_dataset(d)
    data = tr.TrainingData.from_dataset(manifest, reader)
    t0 = time.time()
    result = tr.train_single(cfg.train, cfg.network, data)
    wall = time.time() - t0
    return cfg, data, result, wall


def test_c01_physics_fixed_point(fluid):
    t0 = time.time()
    worst = {}
    for model, t_max in (("RP", 50e-6), ("KM", 55e-6)):
        sc = make_scales(50e-6, t_max, fluid)
        g = dimensionless_groups(fluid, sc)
        ode = it.BubbleODE(model, g, 0.0, 1e6, fluid, sc)
        out = it.integrate_fixed(ode, [1.0, 0.0], np.linspace(0, 1, 2001))
        worst[model] = (np.abs(out[:, 0] - 1.0).max(), np.abs(out[:, 1]).max())
        assert worst[model][0] < 1e-9
        assert worst[model][1] < 1e-9
    wall = time.time() - t0
    assert wall < 1.0
    ok("C1", f"equilibrium drift RP {worst['RP'][0]:.1e}, KM {worst['KM'][0]:.1e}; {wall:.2f}s")


def test_c02_incompressible_limit(fluid):
    sc = make_scales(50e-6, 50e-6, fluid)
    g = dimensionless_groups(fluid, sc)
    rng = np.random.default_rng(2)
    states = rng.uniform([0.4, -2.0], [2.0, 2.0], size=(1000, 2))
    ps = rng.uniform(-2, 8, 1000)
    dps = rng.uniform(-30, 30, 1000)
    err = {}
    for eps in (1e-3, 1e-4):
        ge = groups_with_mach(g, eps)
        from bubbleonet.physics import km_rhs

        err[eps] = max(
            abs(km_rhs(s, p, dp, ge)[1] - rp_rhs(s, p, g)[1])
            for s, p, dp in zip(states, ps, dps)
        )
    ratio = err[1e-3] / err[1e-4]
    assert 8.0 <= ratio <= 12.0
    ok("C2", f"max-error ratio M=1e-3 vs 1e-4 is {ratio:.2f} (linear decay)")


def test_c03_integrator_order(fluid):
    orders = []
    # linear decay over a horizon long enough to stay above roundoff
    errs = []
    for n in (500, 1000, 2000):
        grid = np.linspace(0, 20.0, n + 1)
        out = it.integrate_fixed(lambda t, y: -y, [1.0], grid)
        errs.append(np.abs(out[:, 0] - np.exp(-grid)).max())
    orders += [math.log2(errs[0] / errs[1]), math.log2(errs[1] / errs[2])]
    # unforced bubble oscillation from a perturbed start
    sc = make_scales(50e-6, 50e-6, fluid)
    g = dimensionless_groups(fluid, sc)
    p_eq = fluid.P0 / sc.P_star
    f = lambda t, y: rp_rhs(y, p_eq, g)
    ref = it.integrate_fixed(f, [1.3, 0.0], np.linspace(0, 1, 16001))
    errs = []
    for n in (500, 1000, 2000):
        out = it.integrate_fixed(f, [1.3, 0.0], np.linspace(0, 1, n + 1))
        idx = np.linspace(0, 16000, n + 1).astype(int)
        errs.append(np.abs(out[:, 0] - ref[idx, 0]).max())
    orders += [math.log2(errs[0] / errs[1]), math.log2(errs[1] / errs[2])]
    assert min(orders) >= 4.8
    ok("C3", f"observed orders {', '.join(f'{o:.2f}' for o in orders)} (all >= 4.8)")


def test_c04_residual_self_consistency(fluid):
    t0 = time.time()
    spec = dg.DoeSpec(
        r0_values=(50e-6,),
        amp_range=(1e5, 1e6),
        amp_count=10,
        freq_range=(2e5, 2e6),
        freq_count=10,
        t_max=50e-6,
        n_points=2000,
        model="RP",
    )
    manifest, samples = dg.generate_corpus(spec, fluid)
    assert len(samples) == 100
    worst = 0.0
    for sid, sample in samples.items():
        worst = max(worst, dg.residual_check(sample, fluid))
    wall = time.time() - t0
    assert worst <= 1e-10
    assert wall < 120.0
    ok("C4", f"100-case sub-sweep worst mean ||G||^2 = {worst:.2e}; {wall:.1f}s")


def test_c05_doe_cardinality():
    table1 = dg.DoeSpec(
        r0_values=(50e-6,), amp_range=(1e5, 1e6), amp_count=10,
        freq_range=(2e5, 2e6), freq_count=300, t_max=50e-6, n_points=2000, model="RP",
    )
    assert len(dg.build_doe(table1)) == 3000
    metas = [dg.SampleMeta(id=i, R0=50e-6, amp=1e5, freq=2e5, model="RP") for i in range(3000)]
    manifest = dg.DatasetManifest(doe=table1, fluid=FluidParams(), samples=metas)
    manifest = dg.split(manifest, 0.8, seed=1)
    assert len(manifest.split["train"]) == 2400
    assert len(manifest.split["val"]) == 600
    study = dg.DoeSpec(
        r0_values=(50e-6,), amp_range=(5.5e5, 11e5), amp_count=2,
        freq_range=(6e5, 2.5e6), freq_count=20, t_max=55e-6, n_points=2000, model="KM",
    )
    assert len(dg.build_doe(study)) == 40
    ok("C5", "training sweep 3000 (split 2400/600); study sweep 40")


def test_c06_gradient_exactness(fluid, tmp_path):
    t0 = time.time()
    spec = dg.DoeSpec(
        r0_values=(50e-6,), amp_range=(1e5, 2e5), amp_count=2,
        freq_range=(3e5, 8e5), freq_count=2, t_max=50e-6, n_points=2000, model="RP",
    )
    manifest, samples = dg.generate_corpus(spec, fluid)
    tr.split_profiles(manifest, 0.75, 3)
    d = str(tmp_path / "ds")
    dg.write_dataset(manifest, samples, d)
    data = tr.TrainingData.from_dataset(*dg.read_dataset(d))

    arch = nw.NetworkArch(
        branch_widths=[2000, 32, 32], trunk_widths=[1, 32, 32], branch_K=5, trunk_K=1
    )
    params = nw.init_network(arch, seed=6)
    rng = np.random.default_rng(7)
    for lay in params.branch_hidden:
        lay.a.data = rng.uniform(0.05, 0.15, lay.a.data.shape)
        lay.c.data = rng.uniform(-0.4, 0.4, lay.c.data.shape)
    rows = data.train_rows
    trunk_in = data.t_grid[:, None]
    weights = tr.LossWeights(1.0, 100.0, 0.0)

    def loss_fn():
        ctx = tr._batch_context(data, rows, None)
        R, V = nw.forward(params, data.pressure[rows], trunk_in, need_derivative=True)
        parts = {
            "data": tr.data_loss(R, data.radius[rows][:, 0, :]),
            "ode": tr.ode_loss(R, V, ctx),
        }
        return tr.total_loss(parts, weights)

    loss = loss_fn()
    grads = nw.backward(loss, params)
    checked = 0
    worst = 0.0
    for t_param, g in zip(params.parameters(), grads):
        flat = t_param.data.reshape(-1)
        gf = g.reshape(-1)
        idx = rng.choice(flat.size, size=min(3, flat.size), replace=False)
        for i in idx:
            old = flat[i]
            h = 1e-6 * max(1.0, abs(old))
            flat[i] = old + h
            lp = float(loss_fn().data)
            flat[i] = old - h
            lm = float(loss_fn().data)
            flat[i] = old
            fd = (lp - lm) / (2 * h)
            rel = abs(gf[i] - fd) / (abs(gf[i]) + 1e-12)
            worst = max(worst, rel)
            checked += 1
            assert rel < 1e-5, f"coordinate {i}: analytic {gf[i]:.8e} vs fd {fd:.8e}"
    wall = time.time() - t0
    assert wall < 60.0
    ok("C6", f"{checked} coordinates, worst relative gap {worst:.2e}; {wall:.1f}s")


def test_c07_rowdy_initialization_identity():
    rng = np.random.default_rng(11)
    lay = nw.init_rowdy(rng, 8, 8, K=5)
    h = rng.normal(size=(125000, 8)) * 5.0  # 1e6 scalar samples
    out = nw.rowdy_activate(lay, Tensor(h))
    assert np.array_equal(out.data, np.maximum(h, 0.0))
    ok("C7", "activation at initialization equals relu exactly on 1e6 samples")


def test_c08_output_positivity():
    rng = np.random.default_rng(12)
    arch = nw.NetworkArch(branch_widths=[64, 16, 8], trunk_widths=[1, 16, 8], branch_K=5)
    n_draws = 0
    for seed in range(20):
        params = nw.init_network(arch, seed=seed)
        for lay in params.branch_hidden:
            lay.a.data = rng.uniform(-0.3, 0.3, lay.a.data.shape)
            lay.F.data = rng.uniform(0.1, 3.0, lay.F.data.shape)
            lay.c.data = rng.uniform(-3.0, 3.0, lay.c.data.shape)
        P = rng.uniform(-10, 10, size=(100, 64))
        t_in = rng.uniform(0, 1, size=(500, 1))
        R, _ = nw.forward(params, P, t_in)
        assert np.all(R.data > 0.0)
        n_draws += R.data.size
    assert n_draws >= 1_000_000
    ok("C8", f"{n_draws} gated outputs, all strictly positive")


def test_c09_toy_single_step_training(toy):
    cfg, data, result, wall = toy
    hist = result.history
    w = cfg.train.weights
    total = np.array([w.w_data * h["L_data"] + w.w_ode * h["L_ode"] for h in hist])
    # epoch-0 loss against the tail smoothed over 51 epochs (no cherry-picked
    # final-epoch dip)
    drop = total[0] / total[-51:].mean()
    assert drop >= 100.0, f"smoothed loss drop {drop:.1f}x < 100x"
    result.restore_best()
    trunk_in = data.t_grid[:, None]
    R, _ = nw.forward(result.params, data.pressure[data.val_rows], trunk_in)
    truth = data.radius[data.val_rows][:, 0, :]
    rel = np.linalg.norm(R.data - truth, axis=1) / np.linalg.norm(truth, axis=1)
    assert rel.max() < 0.05, f"validation relative L2 max {rel.max():.3f}"
    assert wall < 600.0, f"training took {wall:.0f}s"
    ok(
        "C9",
        f"loss drop {drop:.0f}x, val rel-L2 max {rel.max()*100:.2f}% "
        f"(mean {rel.mean()*100:.2f}%), {wall/60:.1f} min",
    )


def test_c10_two_step_parity(toy, tmp_path):
    cfg1, data, single_result, _ = toy
    cfg = cf.load(TOY_TWOSTEP_CONFIG)
    t0 = time.time()
    result, basis = tr.train_two_step(cfg.train, cfg.network, data)
    wall = time.time() - t0
    d = basis.U.shape[1]
    orth = np.abs(basis.U.T @ basis.U - np.eye(d)).max()
    recon = basis.U @ np.diag(basis.Sigma) @ basis.V.T
    rec_rel = np.abs(recon - basis.T_star).max() / np.abs(basis.T_star).max()
    assert orth < 1e-8
    assert rec_rel < 1e-10
    assert result.best_val <= 2.0 * single_result.best_val, (
        f"two-step val MSE {result.best_val:.3e} vs single {single_result.best_val:.3e}"
    )
    ok(
        "C10",
        f"val MSE {result.best_val:.3e} (single-step {single_result.best_val:.3e}), "
        f"U'U gap {orth:.1e}, basis reconstruction {rec_rel:.1e}, {wall/60:.1f} min",
    )


def test_c11_spectral_diagnostics(fluid):
    # bin-aligned synthetic sinusoid
    n, dt = 2048, 1e-6
    t = np.arange(n) * dt
    k0 = 73
    rep = sp.fft_spectrum(np.sin(2 * np.pi * k0 / (n * dt) * t), dt)
    assert int(np.argmax(rep.mags)) == k0
    # unforced oscillation vs the small-oscillation resonance estimate
    t_max = 400e-6
    sc = make_scales(50e-6, t_max, fluid)
    g = dimensionless_groups(fluid, sc)
    ode = it.BubbleODE("RP", g, 0.0, 1e6, fluid, sc)
    grid = np.linspace(0, 1, 4096)
    _, states = it.integrate_adaptive(ode, [1.02, 0.0], (0, 1.0), 1e-10, 1e-12, t_eval=grid)
    rep2 = sp.fft_spectrum(states[:, 0], t_max / 4095)
    peak_f = rep2.freqs[np.argmax(rep2.mags)]
    f_m = sp.minnaert_frequency(fluid, 50e-6)
    gap = abs(peak_f - f_m) / f_m
    assert gap < 0.10
    ok("C11", f"synthetic bin {k0} exact; free-oscillation peak {peak_f/1e3:.1f} kHz "
              f"vs estimate {f_m/1e3:.1f} kHz ({gap*100:.1f}%)")


def test_c12_multi_radius_plumbing():
    X, desc = tr.multi_radius_assemble(np.arange(5), np.linspace(0, 1, 2000))
    assert X.shape == (10000, 2)
    assert desc == (5, 2000)
    m = 3
    out = np.arange(m * 10000, dtype=float).reshape(m, 10000)
    cube = out.reshape(m, 5, 2000)
    assert np.array_equal(cube.reshape(m, 10000), out)
    assert np.array_equal(cube[1, 2], out[1, 2 * 2000 : 3 * 2000])
    ok("C12", "10000x2 trunk input; m x 5 x 2000 reshape round-trips exactly")


def test_c13_serialization(fluid, tmp_path):
    spec = dg.DoeSpec(
        r0_values=(50e-6,), amp_range=(1e5, 2e5), amp_count=2,
        freq_range=(3e5, 6e5), freq_count=2, t_max=50e-6, n_points=256, model="RP",
    )
    manifest, samples = dg.generate_corpus(spec, fluid)
    manifest = dg.split(manifest, 0.8, seed=1)
    d = str(tmp_path / "ds")
    dg.write_dataset(manifest, samples, d)
    m2, reader = dg.read_dataset(d)
    for sid in m2.ok_ids():
        s = reader[sid]
        assert np.array_equal(s.radius, samples[sid].radius)
        assert np.array_equal(s.rdot, samples[sid].rdot)
        assert np.array_equal(s.pressure.p_bar, samples[sid].pressure.p_bar)
    # corruption detection
    import os

    path = os.path.join(d, "samples.bin")
    blob = bytearray(open(path, "rb").read())
    blob[100] ^= 0x01
    open(path, "wb").write(bytes(blob))
    _, reader2 = dg.read_dataset(d)
    from bubbleonet.errors import ChecksumError

    with pytest.raises(ChecksumError):
        reader2[0]
    # checkpoint round trip
    arch = nw.NetworkArch(branch_widths=[256, 12, 8], trunk_widths=[1, 12, 8], trunk_K=3)
    params = nw.init_network(arch, seed=3)
    params.basis_V = np.linalg.qr(np.random.default_rng(0).normal(size=(8, 8)))[0]
    params.basis_sigma = np.linspace(2.0, 0.5, 8)
    cdir = str(tmp_path / "ckpt")
    nw.save_checkpoint(params, cdir)
    loaded, _ = nw.load_checkpoint(cdir)
    for (na, a), (_, b) in zip(params.named_parameters(), loaded.named_parameters()):
        assert np.array_equal(a.data, b.data), na
    assert np.array_equal(loaded.basis_V, params.basis_V)
    ok("C13", "dataset + checkpoint round trips bit-exact; corruption detected")


def test_c14_determinism(fluid, tmp_path, toy):
    # dataset bytes
    spec = dg.DoeSpec(
        r0_values=(50e-6,), amp_range=(1e5, 2e5), amp_count=2,
        freq_range=(3e5, 6e5), freq_count=2, t_max=50e-6, n_points=256, model="RP",
    )
    blobs = []
    for sub in ("a", "b"):
        manifest, samples = dg.generate_corpus(spec, fluid)
        manifest = dg.split(manifest, 0.8, seed=4)
        d = tmp_path / sub
        dg.write_dataset(manifest, samples, str(d))
        blobs.append(((d / "manifest.json").read_bytes(), (d / "samples.bin").read_bytes()))
    assert blobs[0] == blobs[1]
    # training histories bit-identical on the toy corpus
    _, data, _, _ = toy
    arch = nw.NetworkArch(branch_widths=[2000, 16, 8], trunk_widths=[1, 16, 8])
    cfg = tr.TrainConfig(lr=1e-3, batch_size=20, epochs=8, seed=9,
                         weights=tr.LossWeights(1.0, 100.0, 0.0))
    h1 = tr.train_single(cfg, arch, data).history
    h2 = tr.train_single(cfg, arch, data).history
    assert h1 == h2
    # inference bytes
    params = nw.init_network(arch, seed=1)
    P = data.pressure[:4]
    a, _ = nw.forward(params, P, data.t_grid[:, None])
    b, _ = nw.forward(params, P, data.t_grid[:, None])
    assert np.array_equal(a.data, b.data)
    ok("C14", "dataset bytes, training histories, and inference bit-identical")
