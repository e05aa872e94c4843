"""CTC loss, logit gradients, greedy and prefix beam-search decoding, LER.

Conventions, fixed across the toolkit:

* Blank is the last class, index C - 1.
* ``alpha[t][s]`` is the total probability of all length-(t+1) alignment
  prefixes that sit at extended-label position ``s`` at frame ``t``,
  including the emission at ``t``.
* ``beta[t][s]`` is the total probability of completing the label sequence
  over frames ``t+1 .. T-1`` starting from position ``s``, excluding the
  emission at ``t``. With that split,
  ``logsumexp_s(alpha[t][s] + beta[t][s])`` equals the total log-likelihood
  at every frame, which the tests check directly.

All recursions run in log space.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import groupby, product

import numpy as np

NEG_INF = -np.inf

_ROW_NORM_TOL = 1e-6
_BRUTEFORCE_LIMIT = 10**6


def _check_log_dist(log_probs: np.ndarray) -> np.ndarray:
    log_probs = np.asarray(log_probs, dtype=np.float64)
    if log_probs.ndim != 2:
        raise ValueError(f"expected a T x C matrix, got shape {log_probs.shape}")
    row_lse = np.logaddexp.reduce(log_probs, axis=1)
    if not np.all(np.abs(row_lse) <= _ROW_NORM_TOL):
        bad = int(np.argmax(np.abs(row_lse)))
        raise ValueError(f"row {bad} is not a normalized log-distribution")
    return log_probs


def extend_with_blanks(labels, blank: int) -> np.ndarray:
    """Interleave blanks around every label: [b, l1, b, l2, ..., b]."""
    ext = np.full(2 * len(labels) + 1, blank, dtype=np.int64)
    ext[1::2] = list(labels)
    return ext


def collapse_path(path, blank: int) -> tuple[int, ...]:
    """Merge adjacent repeats, then drop blanks."""
    return tuple(k for k, _ in groupby(path) if k != blank)


@dataclass
class CtcResult:
    neg_log_likelihood: float
    dlogits: np.ndarray
    feasible: bool
    log_alpha: np.ndarray
    log_beta: np.ndarray
    log_likelihood: float


def ctc_forward_backward(log_probs: np.ndarray, labels) -> CtcResult:
    """Forward-backward CTC loss and its gradient with respect to logits.

    ``log_probs`` must hold normalized log-distributions (one row per
    frame); ``labels`` are symbol ids without blanks. When no alignment of
    the labels fits into T frames the loss is +inf, the gradient is zero,
    and the result is flagged infeasible.
    """
    log_probs = _check_log_dist(log_probs)
    t_len, n_classes = log_probs.shape
    blank = n_classes - 1
    labels = tuple(int(x) for x in labels)
    if any(not 0 <= x < blank for x in labels):
        raise ValueError(f"labels must lie in [0, {blank}), got {labels}")

    ext = extend_with_blanks(labels, blank)
    s_len = len(ext)
    ly = log_probs[:, ext]  # (T, S) emission log-probs per extended position

    # skip transition s-2 -> s allowed into a label position that differs
    # from the label two slots back
    skip_ok = np.zeros(s_len, dtype=bool)
    if s_len > 2:
        skip_ok[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    alpha = np.full((t_len, s_len), NEG_INF)
    alpha[0, 0] = ly[0, 0]
    if s_len > 1:
        alpha[0, 1] = ly[0, 1]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        if s_len > 2:
            skipped = np.where(skip_ok[2:], prev[:-2], NEG_INF)
            acc[2:] = np.logaddexp(acc[2:], skipped)
        alpha[t] = ly[t] + acc

    beta = np.full((t_len, s_len), NEG_INF)
    beta[t_len - 1, s_len - 1] = 0.0
    if s_len > 1:
        beta[t_len - 1, s_len - 2] = 0.0
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1] + ly[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        if s_len > 2:
            skipped = np.where(skip_ok[2:], nxt[2:], NEG_INF)
            acc[:-2] = np.logaddexp(acc[:-2], skipped)
        beta[t] = acc

    log_p = alpha[t_len - 1, s_len - 1]
    if s_len > 1:
        log_p = np.logaddexp(log_p, alpha[t_len - 1, s_len - 2])
    log_p = float(log_p)

    if log_p == NEG_INF:
        return CtcResult(np.inf, np.zeros_like(log_probs), False, alpha, beta, log_p)

    gamma = alpha + beta  # (T, S)
    log_q = np.full((t_len, n_classes), NEG_INF)
    for k in np.unique(ext):
        cols = gamma[:, ext == k]
        log_q[:, k] = np.logaddexp.reduce(cols, axis=1)
    dlogits = np.exp(log_probs) - np.exp(log_q - log_p)
    return CtcResult(-log_p, dlogits, True, alpha, beta, log_p)


def ctc_loss_bruteforce(log_probs: np.ndarray, labels) -> float:
    """Loss by exhaustive path enumeration; the independent test oracle.

    Sums the probability of every length-T path whose collapse equals the
    labels. Only viable for C**T up to 1e6.
    """
    log_probs = _check_log_dist(log_probs)
    t_len, n_classes = log_probs.shape
    if n_classes**t_len > _BRUTEFORCE_LIMIT:
        raise ValueError(f"instance too large: {n_classes}^{t_len} paths")
    blank = n_classes - 1
    target = tuple(int(x) for x in labels)

    total = NEG_INF
    for path in product(range(n_classes), repeat=t_len):
        if collapse_path(path, blank) == target:
            lp = sum(log_probs[t, k] for t, k in enumerate(path))
            total = np.logaddexp(total, lp)
    return float(-total)


def greedy_decode(log_probs: np.ndarray) -> tuple[int, ...]:
    """Per-frame argmax (ties to the lowest class index), then collapse."""
    log_probs = np.asarray(log_probs)
    blank = log_probs.shape[1] - 1
    path = np.argmax(log_probs, axis=1)
    return collapse_path(path.tolist(), blank)


def beam_search_decode(log_probs: np.ndarray, beam_width: int) -> tuple[int, ...]:
    """Prefix beam search over collapsed label prefixes.

    Per prefix two masses are tracked: alignments ending in blank and in
    the final label. Paths collapsing to the same prefix merge. Ties break
    toward the lexicographically smaller prefix.
    """
    if beam_width < 1:
        raise ValueError(f"beam_width must be >= 1, got {beam_width}")
    log_probs = np.asarray(log_probs, dtype=np.float64)
    t_len, n_classes = log_probs.shape
    blank = n_classes - 1

    # prefix -> [log P(ends in blank), log P(ends in its last label)]
    beams: dict[tuple[int, ...], list[float]] = {(): [0.0, NEG_INF]}
    for t in range(t_len):
        lp = log_probs[t]
        nxt: dict[tuple[int, ...], list[float]] = {}

        def slot(prefix):
            entry = nxt.get(prefix)
            if entry is None:
                entry = [NEG_INF, NEG_INF]
                nxt[prefix] = entry
            return entry

        for prefix, (p_b, p_nb) in beams.items():
            total = np.logaddexp(p_b, p_nb)
            entry = slot(prefix)
            entry[0] = np.logaddexp(entry[0], total + lp[blank])
            if prefix:
                # same label again without an intervening blank: merges
                entry[1] = np.logaddexp(entry[1], p_nb + lp[prefix[-1]])
            for c in range(blank):
                if prefix and c == prefix[-1]:
                    mass = p_b + lp[c]
                else:
                    mass = total + lp[c]
                grown = slot(prefix + (c,))
                grown[1] = np.logaddexp(grown[1], mass)

        ranked = sorted(
            nxt.items(), key=lambda kv: (-np.logaddexp(kv[1][0], kv[1][1]), kv[0])
        )
        beams = dict(ranked[:beam_width])

    best = min(beams.items(), key=lambda kv: (-np.logaddexp(kv[1][0], kv[1][1]), kv[0]))
    return best[0]


def edit_distance(ref, hyp) -> int:
    """Levenshtein distance with unit costs, iterative DP."""
    ref = tuple(ref)
    hyp = tuple(hyp)
    if not ref:
        return len(hyp)
    if not hyp:
        return len(ref)
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(
                prev[j] + 1,
                cur[j - 1] + 1,
                prev[j - 1] + (r != h),
            )
        prev = cur
    return prev[-1]


def label_error_rate(ref, hyp) -> float:
    """Edit distance divided by the reference length."""
    ref = tuple(ref)
    if not ref:
        raise ValueError("empty reference; use corpus_ler for aggregates")
    return edit_distance(ref, hyp) / len(ref)


def corpus_ler(pairs) -> float:
    """Total edit distance over total reference length across (ref, hyp) pairs."""
    dist = 0
    ref_len = 0
    for ref, hyp in pairs:
        dist += edit_distance(ref, hyp)
        ref_len += len(tuple(ref))
    if ref_len == 0:
        raise ValueError("total reference length is zero")
    return dist / ref_len
