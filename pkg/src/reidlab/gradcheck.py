"""Finite-difference verification of every backward rule.

Central differences with eps=1e-5 in float64.  Each check builds a scalar
loss from one or more leaf tensors, runs backward, then perturbs every leaf
coordinate twice.  The relative error reported is

    ||g_analytic - g_numeric|| / max(||g_analytic||, ||g_numeric||, 1e-12)

and must stay below 1e-4.  Inputs are sampled away from kinks (relu at 0,
bilinear corners at integer coordinates) where finite differences are not
meaningful.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

EPS = 1e-5
RTOL = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    instances: int

    @property
    def ok(self) -> bool:
        return self.max_rel_err < RTOL


def numeric_grad(f, leaf: ad.Tensor, eps: float = EPS) -> np.ndarray:
    """Central-difference gradient of scalar-valued ``f()`` w.r.t. ``leaf``."""
    g = np.zeros_like(leaf.data)
    flat = leaf.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        fp = f()
        flat[i] = keep - eps
        fm = f()
        flat[i] = keep
        gflat[i] = (fp - fm) / (2.0 * eps)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    na = np.linalg.norm(a.reshape(-1))
    nb = np.linalg.norm(b.reshape(-1))
    return float(np.linalg.norm((a - b).reshape(-1)) / max(na, nb, 1e-12))


def check_fn(build, leaves: list[ad.Tensor]) -> float:
    """Compare backward() against numeric gradients for one loss instance.

    ``build()`` must construct the scalar loss from the current leaf data.
    The comparison is over the concatenated gradient w.r.t. every leaf
    coordinate, so structurally-zero components (a bias that cancels out of
    the loss exactly, leaving only rounding residue in the analytic value)
    are judged against the gradient's overall scale rather than 0/0.
    """
    ad.zero_grads(leaves)
    loss = build()
    ad.backward(loss)
    analytic, numeric = [], []
    for leaf in leaves:
        num = numeric_grad(lambda: float(build().data), leaf)
        got = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        analytic.append(got.reshape(-1))
        numeric.append(num.reshape(-1))
    return rel_err(np.concatenate(analytic), np.concatenate(numeric))


def _away_from(x: np.ndarray, bad: float, margin: float) -> np.ndarray:
    """Push values that sit within ``margin`` of ``bad`` out of the band."""
    shift = np.where(np.abs(x - bad) < margin, np.sign(x - bad + 1e-9) * margin * 2, 0.0)
    return x + shift


class Battery:
    """The standard gradient-check battery run by tests and the CLI."""

    def __init__(self, seed: int = 0, instances: int = 20):
        self.rng = np.random.default_rng(seed)
        self.instances = instances
        self.results: list[CheckResult] = []

    def _record(self, name: str, runner) -> None:
        worst = 0.0
        for _ in range(self.instances):
            self._probes = {}
            worst = max(worst, runner())
        self.results.append(CheckResult(name, worst, self.instances))

    def _leaf(self, shape, lo=-2.0, hi=2.0):
        return ad.tensor(self.rng.uniform(lo, hi, size=shape), requires_grad=True)

    def _weighted_sum(self, t: ad.Tensor) -> ad.Tensor:
        # the probe is cached per check instance: build() is re-evaluated for
        # every finite-difference step and must stay the same function
        pr = self._probes.get(t.data.shape)
        if pr is None:
            pr = self._probes[t.data.shape] = self.rng.normal(size=t.data.shape)
        return ad.tsum(ad.mul(t, ad.constant(pr)))

    # ---- individual op checks ----

    def run_all(self) -> list[CheckResult]:
        rng = self.rng

        def binary(name, op, positive_b=False):
            def runner():
                a = self._leaf((3, 4))
                b = self._leaf((3, 4), 0.5, 2.0) if positive_b else self._leaf((3, 4))
                return check_fn(lambda: self._weighted_sum(op(a, b)), [a, b])

            self._record(name, runner)

        def unary(name, op, lo=-2.0, hi=2.0, avoid_zero_margin=0.0):
            def runner():
                a = self._leaf((4, 3), lo, hi)
                if avoid_zero_margin:
                    a.data = _away_from(a.data, 0.0, avoid_zero_margin)
                return check_fn(lambda: self._weighted_sum(op(a)), [a])

            self._record(name, runner)

        binary("add", ad.add)
        binary("sub", ad.sub)
        binary("mul", ad.mul)
        binary("div", ad.div, positive_b=True)
        unary("neg", ad.neg)
        unary("scale", lambda a: ad.scale(a, 1.7))
        unary("relu", ad.relu, avoid_zero_margin=0.05)
        unary("sigmoid", ad.sigmoid)
        unary("exp", ad.exp)
        unary("log", ad.log, lo=0.2, hi=3.0)
        unary("sqrt", ad.sqrt, lo=0.2, hi=3.0)
        unary("softmax", lambda a: ad.softmax(a, axis=-1))
        unary("clip_min", lambda a: ad.clip_min(a, 0.25), avoid_zero_margin=0.0)

        def mm_runner():
            a = self._leaf((3, 4))
            b = self._leaf((4, 2))
            return check_fn(lambda: self._weighted_sum(ad.matmul(a, b)), [a, b])

        self._record("matmul", mm_runner)

        def reshape_runner():
            a = self._leaf((3, 4))
            return check_fn(lambda: self._weighted_sum(ad.reshape(a, (2, 6))), [a])

        self._record("reshape", reshape_runner)

        def transpose_runner():
            a = self._leaf((2, 3, 4))
            return check_fn(lambda: self._weighted_sum(ad.transpose(a, (2, 0, 1))), [a])

        self._record("transpose", transpose_runner)

        def concat_runner():
            a = self._leaf((2, 3))
            b = self._leaf((2, 2))
            return check_fn(lambda: self._weighted_sum(ad.concat([a, b], axis=1)), [a, b])

        self._record("concat", concat_runner)

        def take_runner():
            a = self._leaf((3, 4))
            idx = rng.integers(0, 12, size=6)
            return check_fn(lambda: self._weighted_sum(ad.take(a, idx)), [a])

        self._record("take", take_runner)

        def sum_runner():
            a = self._leaf((3, 4))
            return check_fn(lambda: self._weighted_sum(ad.tsum(a, axis=1)), [a])

        self._record("sum", sum_runner)

        def mean_runner():
            a = self._leaf((3, 4))
            return check_fn(lambda: self._weighted_sum(ad.tmean(a, axis=0)), [a])

        self._record("mean", mean_runner)

        def norm_runner():
            a = self._leaf((5,), 0.5, 2.0)
            return check_fn(lambda: ad.l2_norm(a), [a])

        self._record("l2_norm", norm_runner)

        def pool_runner():
            a = self._leaf((2, 3, 4, 4))
            return check_fn(lambda: self._weighted_sum(ad.mean_pool_spatial(a)), [a])

        self._record("mean_pool_spatial", pool_runner)

        def conv_runner():
            x = self._leaf((2, 5, 6))
            w = self._leaf((3, 2, 2, 2))
            stride = int(rng.integers(1, 3))
            pad = int(rng.integers(0, 2))
            if (5 + 2 * pad - 2) % stride or (6 + 2 * pad - 2) % stride:
                stride = 1
            return check_fn(lambda: self._weighted_sum(ad.conv2d(x, w, stride=stride, pad=pad)), [x, w])

        self._record("conv2d", conv_runner)

        def avgpool_runner():
            x = self._leaf((3, 4, 6))
            return check_fn(lambda: self._weighted_sum(ad.avg_pool2d(x, 2)), [x])

        self._record("avg_pool2d", avgpool_runner)

        def upsample_runner():
            x = self._leaf((2, 3, 4))
            return check_fn(lambda: self._weighted_sum(ad.upsample_bilinear(x, (5, 7))), [x])

        self._record("upsample_bilinear", upsample_runner)

        def bsample_runner():
            x = self._leaf((3, 5, 6))
            # keep fractional part away from 0/1 so the gather stays smooth
            pos = ad.tensor(rng.uniform(0.3, 3.7, size=2) + 0.37, requires_grad=True)
            return check_fn(lambda: self._weighted_sum(ad.bilinear_sample(x, pos)), [x, pos])

        self._record("bilinear_sample", bsample_runner)

        def xent_runner():
            z = self._leaf((4, 3))
            y = rng.integers(0, 3, size=4)
            return check_fn(lambda: ad.cross_entropy_logits(z, y), [z])

        self._record("cross_entropy_logits", xent_runner)

        self._module_checks()
        return self.results

    def _module_checks(self) -> None:
        """Composed-model checks: deformable conv, non-local, attention, losses."""
        from . import alignment, attention, pairing

        rng = self.rng

        def deform_runner():
            x = self._leaf((2, 5, 4))
            w = self._leaf((2, 2, 3, 3))
            # keep every sampling position at least 0.15 from the bilinear
            # kinks at integer coordinates
            mag = rng.uniform(0.15, 0.85, size=(18, 5, 4))
            sgn = rng.choice([-1.0, 1.0], size=(18, 5, 4))
            off = ad.tensor(mag * sgn, requires_grad=True)
            return check_fn(lambda: self._weighted_sum(alignment.deform_conv(x, w, off)), [x, w, off])

        self._record("deform_conv", deform_runner)

        def nonlocal_runner():
            z = self._leaf((4, 3, 2))
            p = alignment.NonLocalParams.init(4, rng)
            for t in p.tensors():
                t.requires_grad = True
            leaves = [z, p.sigma1, p.sigma2, p.wv, p.wo]
            p.wo.data = rng.normal(size=p.wo.data.shape) * 0.3
            return check_fn(lambda: self._weighted_sum(alignment.nonlocal_block(z, p)), leaves)

        self._record("nonlocal_block", nonlocal_runner)

        def cpam_runner():
            u = self._leaf((3, 4, 2), 0.0, 1.5)
            p = attention.ChannelAttentionParams.init(3, rng, hidden=5)
            for t in (p.w1, p.w2):
                t.requires_grad = True
            return check_fn(lambda: self._weighted_sum(attention.channel_attention(u, p)), [u, p.w1, p.w2])

        self._record("channel_attention", cpam_runner)

        def loss_c_runner():
            # moderate scales keep the softmax away from saturation, where
            # the loss falls below float64 resolution and differences vanish
            x = self._leaf((5,), -0.5, 0.5)
            w = self._leaf((5, 5), -0.5, 0.5)
            b = ad.tensor(rng.normal(size=()), requires_grad=True)
            v = ad.constant(rng.normal(size=(4, 5)) * 0.5)
            head = pairing.SimilarityHead(w, b)
            return check_fn(lambda: pairing.class_loss(x, v, head, 2), [x, w, b])

        self._record("loss_C", loss_c_runner)

        def loss_gs_runner():
            cfg = pairing.SeparationConfig()
            emb = self._leaf((4, 5))
            w = self._leaf((5, 5))
            b = ad.tensor(rng.normal(size=()), requires_grad=True)
            v = ad.constant(rng.normal(size=(3, 5)))
            labels = rng.integers(0, 3, size=4)
            head = pairing.SimilarityHead(w, b)

            def build():
                scores = pairing.pair_score_matrix(emb, v, head, labels)
                idx = [1, 2, 5, 7]
                return pairing.separation_loss(ad.take(scores, idx), cfg)

            return check_fn(build, [emb, w, b])

        self._record("loss_GS", loss_gs_runner)

        def loss_adv_runner():
            adv = attention.AdversaryParams.init(4, rng, hidden=6, out_dim=3)
            sa = [self._leaf((2, 4)) for _ in range(3)]
            leaves = sa + list(adv.tensors())
            for t in adv.tensors():
                t.requires_grad = True
            # reversal flips signs, so compare against the reversed analytic gradient
            return check_fn(
                lambda: attention.discrepancy_loss(sa, adv, reverse_features=False), leaves
            )

        self._record("loss_Adv", loss_adv_runner)

        def loss_s_runner():
            xt = self._leaf((4, 3, 2))
            w = self._leaf((3, 4))
            b = ad.tensor(rng.normal(size=3), requires_grad=True)
            y = int(rng.integers(0, 3))

            def build():
                logits = alignment.classify_block(xt, w, b)
                return ad.neg(alignment.classification_log_prob(logits, y))

            return check_fn(build, [xt, w, b])

        self._record("loss_S", loss_s_runner)


def run_battery(seed: int = 0, instances: int = 20, verbose: bool = True) -> tuple[bool, list[CheckResult], float]:
    t0 = time.perf_counter()
    battery = Battery(seed=seed, instances=instances)
    results = battery.run_all()
    elapsed = time.perf_counter() - t0
    ok = all(r.ok for r in results)
    if verbose:
        for r in results:
            mark = "ok " if r.ok else "FAIL"
            print(f"[{mark}] {r.name:24s} max_rel_err={r.max_rel_err:.3e}  ({r.instances} instances)")
        print(f"{'all passed' if ok else 'FAILURES'} in {elapsed:.1f}s")
    return ok, results, elapsed
