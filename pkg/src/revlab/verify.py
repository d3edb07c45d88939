"""Executable checks of permutation equivariance and reversal invariance.

Every check is deterministic given its seed and returns a :class:`CheckReport`.
Each check also has a corruption switch that must make it fail; the tests use
it to make sure a passing check is not vacuous.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .model import (
    ModelConfig,
    ModelError,
    batch_loss,
    batch_loss_and_grad,
    forward_logprobs,
    init_params,
    param_shapes,
    sequence_nll,
)
from .reparam import (
    ParamMap,
    apply_param_map,
    param_map_notes,
    permute_columns,
    permute_sequence,
    pushforward_gradient,
)
from .seqcore import Corpus, reverse_corpus
from .tokenizer import BpeTokenizer, char_tokenizer, encode_corpus, propose_reversal_bijection, train_bpe
from .train import Optimizer, TrainConfig, TrainingDiverged, batch_schedule, train

PASS_TOL = 1e-9
TRAIN_PARAM_TOL = 1e-5
TRAIN_LOSS_TOL = 1e-7
GRAD_REL_TOL = 1e-6


@dataclass
class CheckReport:
    name: str
    cases_run: int
    max_abs_error: float
    tolerance: float
    passed: bool
    worst_case: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "cases_run": self.cases_run,
            "max_abs_error": self.max_abs_error,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "worst_case": self.worst_case,
            "notes": list(self.notes),
            "extra": self.extra,
        }

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"[{verdict}] {self.name}: max error {self.max_abs_error:.3e} (tol {self.tolerance:.1e}, {self.cases_run} cases)"


def _run_cases(fn, n: int, workers: int):
    """Evaluate ``fn(i)`` for ``i < n``; results always come back in case order."""
    if workers <= 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(n)))


# --------------------------------------------------------------------------
# vocabulary permutation equivariance
# --------------------------------------------------------------------------


def check_perm_equivariance(
    cfg: ModelConfig,
    seed: int,
    n_cases: int,
    *,
    identity: bool = False,
    corrupt: bool = False,
    max_seq_len: int = 32,
    workers: int = 1,
) -> CheckReport:
    """Compare ``logp(theta, z)`` with ``logp(Phi_pi(theta), pi(z))`` after relabeling columns.

    Each case draws fresh parameters, a uniformly random permutation and a
    random sequence, and checks both evaluation directions.
    """
    v = cfg.vocab_size
    top = min(max_seq_len, cfg.max_len)

    def case(i):
        rng = np.random.default_rng([seed, i])
        params = init_params(cfg, int(rng.integers(2**31)))
        perm = tuple(range(v)) if identity else tuple(int(t) for t in rng.permutation(v))
        psi = ParamMap(perm)
        m = int(rng.integers(2, top + 1)) if top >= 2 else 1
        z = tuple(int(t) for t in rng.integers(0, v, size=m))
        mapped = apply_param_map(psi, params, cfg)
        if corrupt:
            # a single entry: LayerNorm would cancel a constant shift of the whole row
            mapped["E"][perm[z[0]], 0] += 1.0
        pz = permute_sequence(perm, z)
        err = 0.0
        for direction in ("standard", "mirror"):
            lp = forward_logprobs(params, cfg, z, direction)
            lp_mapped = forward_logprobs(mapped, cfg, pz, direction)
            if lp.size:
                err = max(err, float(np.max(np.abs(permute_columns(perm, lp) - lp_mapped))))
        return err, {"case": i, "perm": list(perm), "z": list(z)}

    results = _run_cases(case, n_cases, workers)
    worst = max(range(n_cases), key=lambda i: results[i][0]) if n_cases else None
    max_err = results[worst][0] if n_cases else 0.0
    name = f"perm_equivariance[{cfg.pos_mode},{'tied' if cfg.tie_embeddings else 'untied'}]"
    return CheckReport(
        name=name,
        cases_run=n_cases,
        max_abs_error=max_err,
        tolerance=PASS_TOL,
        passed=max_err <= PASS_TOL,
        worst_case=results[worst][1] if n_cases else {},
        extra={"config": cfg.to_dict(), "seed": seed, "corrupt": corrupt, "identity": identity},
    )


# --------------------------------------------------------------------------
# reversal invariance
# --------------------------------------------------------------------------


@dataclass
class ReversalSetup:
    """Paired tokenizers for a corpus and its reversal, plus the witness map."""

    corpus: Corpus
    reversed_corpus: Corpus
    t_fwd: BpeTokenizer
    t_rev: BpeTokenizer
    perm: tuple[int, ...]
    notes: list[str]

    @property
    def vocab_size(self) -> int:
        return self.t_fwd.vocab_size

    def forward_seqs(self):
        return encode_corpus(self.t_fwd, self.corpus)

    def reversed_seqs(self):
        return encode_corpus(self.t_rev, self.reversed_corpus)


def reversal_setup(corpus: Corpus, vocab_size: int | None = None) -> ReversalSetup:
    """Train tokenizers on ``D`` and ``T(D)``.

    ``vocab_size=None`` means character level. When the reversal bijection of
    the BPE pair is not total, the pair falls back to character level and the
    fallback is noted.
    """
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    rev = reverse_corpus(corpus)
    notes: list[str] = []
    if vocab_size is None:
        t_fwd, t_rev = char_tokenizer(corpus), char_tokenizer(rev)
    else:
        t_fwd, t_rev = train_bpe(corpus, vocab_size), train_bpe(rev, vocab_size)
        bij = propose_reversal_bijection(t_fwd, t_rev)
        if not bij.is_total:
            notes.append(
                f"BPE pair at vocab {vocab_size} has reversal coverage {bij.coverage:.4f}; "
                "fell back to character-level tokenizers"
            )
            t_fwd, t_rev = char_tokenizer(corpus), char_tokenizer(rev)
    bij = propose_reversal_bijection(t_fwd, t_rev)
    perm = tuple(bij.as_permutation())
    return ReversalSetup(corpus, rev, t_fwd, t_rev, perm, notes)


def reversal_map(setup: ReversalSetup, cfg: ModelConfig, flip: bool = True) -> ParamMap:
    return ParamMap(setup.perm, flip_positions=flip and cfg.pos_mode == "learned_absolute")


def _check_lengths(seqs, cfg: ModelConfig, label: str) -> None:
    for i, z in enumerate(seqs):
        if not 2 <= len(z) <= cfg.max_len:
            raise ModelError(f"{label} document {i} encodes to {len(z)} tokens; need between 2 and {cfg.max_len}")


def check_reversal_invariance(
    cfg: ModelConfig,
    seed: int,
    corpus: Corpus,
    n_cases: int,
    *,
    vocab_size: int | None = None,
    flip: bool = True,
    setup: ReversalSetup | None = None,
    workers: int = 1,
) -> CheckReport:
    """Per-document ``NLL(theta; tau, D)`` against mirror ``NLL(Psi(theta); tau_T, T(D))``.

    ``cfg.vocab_size`` is replaced by the size of the trained vocabulary.
    """
    setup = setup or reversal_setup(corpus, vocab_size)
    cfg = cfg.replace(vocab_size=setup.vocab_size)
    psi = reversal_map(setup, cfg, flip)
    fwd = setup.forward_seqs()
    rev = setup.reversed_seqs()
    _check_lengths(fwd, cfg, "forward")
    _check_lengths(rev, cfg, "reversed")
    notes = list(setup.notes) + param_map_notes(psi, cfg)
    if not flip and cfg.pos_mode == "learned_absolute":
        notes.append("position flip disabled (negative control)")

    def case(i):
        params = init_params(cfg, int(np.random.default_rng([seed, i]).integers(2**31)))
        mapped = apply_param_map(psi, params, cfg)
        worst = (0.0, -1)
        total_f = total_r = 0.0
        for j, (zf, zr) in enumerate(zip(fwd, rev)):
            a = sequence_nll(params, cfg, zf, "standard")
            b = sequence_nll(mapped, cfg, zr, "mirror")
            total_f += a
            total_r += b
            if abs(a - b) > worst[0] or worst[1] < 0:
                worst = (abs(a - b), j)
        corpus_err = abs(total_f / len(fwd) - total_r / len(rev))
        return worst[0], worst[1], corpus_err

    results = _run_cases(case, n_cases, workers)
    worst_case = max(range(n_cases), key=lambda i: results[i][0]) if n_cases else None
    max_err = results[worst_case][0] if n_cases else 0.0
    max_corpus_err = max((r[2] for r in results), default=0.0)
    return CheckReport(
        name=f"reversal_invariance[{cfg.pos_mode},{'tied' if cfg.tie_embeddings else 'untied'}"
        f"{'' if flip else ',no-flip'}]",
        cases_run=n_cases,
        max_abs_error=max_err,
        tolerance=PASS_TOL,
        passed=max_err <= PASS_TOL,
        worst_case={"case": worst_case, "document": results[worst_case][1]} if n_cases else {},
        notes=notes,
        extra={
            "config": cfg.to_dict(),
            "seed": seed,
            "param_map": psi.to_dict(),
            "max_corpus_mean_error": max_corpus_err,
            "n_docs": len(fwd),
            "tokenizer_vocab": setup.vocab_size,
            "tokenizer_merges": len(setup.t_fwd.merges),
        },
    )


# --------------------------------------------------------------------------
# gradient gate
# --------------------------------------------------------------------------


def _fd_derivative(f, x0: float, h: float) -> float:
    """Five-point central difference."""
    near = f(x0 + h) - f(x0 - h)
    far = f(x0 + 2 * h) - f(x0 - 2 * h)
    return (8 * near - far) / (12 * h)


def gradient_check(
    cfg: ModelConfig,
    seqs,
    seed: int,
    n_coords: int = 20,
    *,
    direction: str = "standard",
    h: float = 1e-3,
    corrupt: bool = False,
) -> CheckReport:
    """Analytic gradient against central differences on random coordinates.

    A tensor is drawn uniformly, then an entry within it, so small tensors
    (gains, biases, position tables) are sampled as often as large ones. A
    coordinate passes when ``|analytic - numeric| <= tol * max(|analytic|,
    |numeric|)``; entries the batch never touches have both derivatives
    exactly zero and count as agreeing.
    """
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed)
    _, grads = batch_loss_and_grad(params, cfg, seqs, direction)
    if corrupt:
        grads = {k: v * (1.0 + 1e-3) for k, v in grads.items()}
    names = list(param_shapes(cfg))
    rows = []
    worst = {}
    max_rel = 0.0
    for _ in range(n_coords):
        name = names[int(rng.integers(len(names)))]
        arr = params[name]
        idx = np.unravel_index(int(rng.integers(arr.size)), arr.shape)
        analytic = float(grads[name][idx])
        old = arr[idx]

        def f(x):
            arr[idx] = x
            try:
                return batch_loss(params, cfg, seqs, direction)
            finally:
                arr[idx] = old

        numeric = _fd_derivative(f, old, h)
        scale = max(abs(analytic), abs(numeric))
        rel = abs(analytic - numeric) / scale if scale > 0 else 0.0
        rows.append({"tensor": name, "index": [int(i) for i in idx], "analytic": analytic, "numeric": numeric, "rel": rel})
        if rel >= max_rel:
            max_rel = rel
            worst = rows[-1]
    return CheckReport(
        name=f"gradient_gate[{cfg.pos_mode},{'tied' if cfg.tie_embeddings else 'untied'},{direction}]",
        cases_run=len(rows),
        max_abs_error=max_rel,
        tolerance=GRAD_REL_TOL,
        passed=max_rel <= GRAD_REL_TOL,
        worst_case=worst,
        notes=["max_abs_error holds the largest relative error"],
        extra={"coordinates": rows, "step": h},
    )


# --------------------------------------------------------------------------
# matched training
# --------------------------------------------------------------------------


def _max_abs_diff(a, b) -> float:
    return max(float(np.max(np.abs(a[k] - b[k]))) for k in a)


def matched_training_check(
    cfg: ModelConfig,
    train_cfg: TrainConfig,
    corpus: Corpus,
    *,
    vocab_size: int | None = None,
    setup: ReversalSetup | None = None,
    corrupt: bool = False,
) -> CheckReport:
    """Train on ``D`` (standard) and on ``T(D)`` (mirror, from ``Psi(theta0)``) in lockstep.

    After every step the mirror run must sit at ``Psi`` of the standard run.
    The mirror batches use the same document indices as the standard ones.
    """
    setup = setup or reversal_setup(corpus, vocab_size)
    cfg = cfg.replace(vocab_size=setup.vocab_size)
    psi = reversal_map(setup, cfg)
    fwd = setup.forward_seqs()
    rev = setup.reversed_seqs()
    _check_lengths(fwd, cfg, "forward")
    _check_lengths(rev, cfg, "reversed")

    theta_a = init_params(cfg, train_cfg.seed)
    theta_b = apply_param_map(psi, theta_a, cfg)
    if corrupt:
        theta_b["E"][0, 0] += 1e-3
    opt_a = Optimizer(train_cfg, theta_a)
    opt_b = Optimizer(train_cfg, theta_b)
    schedule = batch_schedule(len(fwd), train_cfg.batch_size, train_cfg.steps, train_cfg.seed)

    curve = [{"step": 0, "loss_A": None, "loss_B": None,
              "param_discrepancy": _max_abs_diff(theta_b, apply_param_map(psi, theta_a, cfg)),
              "grad_discrepancy": None}]
    max_loss_diff = 0.0
    max_grad_diff = 0.0
    for step, idx in enumerate(schedule, start=1):
        loss_a, g_a = batch_loss_and_grad(theta_a, cfg, [fwd[i] for i in idx], "standard")
        loss_b, g_b = batch_loss_and_grad(theta_b, cfg, [rev[i] for i in idx], "mirror")
        for loss in (loss_a, loss_b):
            if not math.isfinite(loss):
                raise TrainingDiverged(step, loss)
        grad_diff = _max_abs_diff(g_b, pushforward_gradient(psi, g_a, cfg))
        theta_a = opt_a.step(theta_a, g_a)
        theta_b = opt_b.step(theta_b, g_b)
        disc = _max_abs_diff(theta_b, apply_param_map(psi, theta_a, cfg))
        max_loss_diff = max(max_loss_diff, abs(loss_a - loss_b))
        max_grad_diff = max(max_grad_diff, grad_diff)
        curve.append({"step": step, "loss_A": loss_a, "loss_B": loss_b, "param_discrepancy": disc,
                      "grad_discrepancy": grad_diff})

    worst = max(curve, key=lambda r: r["param_discrepancy"])
    max_disc = worst["param_discrepancy"]
    passed = max_disc <= TRAIN_PARAM_TOL and max_loss_diff <= TRAIN_LOSS_TOL
    return CheckReport(
        name=f"matched_training[{cfg.pos_mode},{train_cfg.optimizer}]",
        cases_run=train_cfg.steps,
        max_abs_error=max_disc,
        tolerance=TRAIN_PARAM_TOL,
        passed=passed,
        worst_case={"step": worst["step"]},
        notes=list(setup.notes) + param_map_notes(psi, cfg),
        extra={
            "config": cfg.to_dict(),
            "train_config": train_cfg.to_dict(),
            "param_map": psi.to_dict(),
            "final_param_discrepancy": curve[-1]["param_discrepancy"],
            "max_loss_diff": max_loss_diff,
            "loss_tolerance": TRAIN_LOSS_TOL,
            "max_grad_discrepancy": max_grad_diff,
            "corrupt": corrupt,
            "curve": curve,
        },
    )


def curve_csv(report: CheckReport) -> str:
    lines = ["step,loss_A,loss_B,param_discrepancy"]
    for row in report.extra["curve"]:
        la = "" if row["loss_A"] is None else repr(row["loss_A"])
        lb = "" if row["loss_B"] is None else repr(row["loss_B"])
        lines.append(f"{row['step']},{la},{lb},{row['param_discrepancy']!r}")
    return "\n".join(lines) + "\n"


def independent_curves_comparison(
    cfg: ModelConfig,
    train_cfg: TrainConfig,
    corpus: Corpus,
    n_seeds: int,
    *,
    vocab_size: int | None = None,
    setup: ReversalSetup | None = None,
) -> CheckReport:
    """Standard-architecture training on ``D`` and on ``T(D)`` with independent seeds.

    Passes when the gap between mean final losses is at most twice the pooled
    seed-to-seed standard deviation. This is a statistical statement, much
    weaker than :func:`matched_training_check`.
    """
    if n_seeds < 3:
        raise ValueError(f"need at least 3 seeds, got {n_seeds}")
    setup = setup or reversal_setup(corpus, vocab_size)
    cfg = cfg.replace(vocab_size=setup.vocab_size)
    fwd = setup.forward_seqs()
    rev = setup.reversed_seqs()
    _check_lengths(fwd, cfg, "forward")
    _check_lengths(rev, cfg, "reversed")

    finals_f, finals_r = [], []
    curves = []
    for s in range(n_seeds):
        seed_f = train_cfg.seed + 2 * s
        seed_r = train_cfg.seed + 2 * s + 1
        tc_f = TrainConfig(**{**train_cfg.to_dict(), "seed": seed_f})
        tc_r = TrainConfig(**{**train_cfg.to_dict(), "seed": seed_r})
        p_f, losses_f = train(init_params(cfg, seed_f), cfg, fwd, tc_f)
        p_r, losses_r = train(init_params(cfg, seed_r), cfg, rev, tc_r)
        finals_f.append(batch_loss(p_f, cfg, fwd))
        finals_r.append(batch_loss(p_r, cfg, rev))
        curves.append({"seed_forward": seed_f, "seed_reversed": seed_r, "loss_forward": losses_f,
                       "loss_reversed": losses_r})
    finals_f = np.array(finals_f)
    finals_r = np.array(finals_r)
    diff = abs(float(finals_f.mean() - finals_r.mean()))
    pooled = math.sqrt((finals_f.var(ddof=1) + finals_r.var(ddof=1)) / 2.0)
    return CheckReport(
        name=f"independent_curves[{cfg.pos_mode},{train_cfg.optimizer}]",
        cases_run=n_seeds,
        max_abs_error=diff,
        tolerance=2.0 * pooled,
        passed=diff <= 2.0 * pooled,
        notes=list(setup.notes) + ["statistical criterion: |mean difference| <= 2 x pooled seed std"],
        extra={
            "config": cfg.to_dict(),
            "train_config": train_cfg.to_dict(),
            "final_nll_forward": finals_f.tolist(),
            "final_nll_reversed": finals_r.tolist(),
            "pooled_std": pooled,
            "curves": curves,
        },
    )
