"""Token-level co-simulation of speculative decoding between a device and a server.

Two engines share the same verification rule:

* ``run_conventional``: strictly alternating draft -> upload -> verify rounds.
* ``run_parallel``: event-driven engine that overlaps drafting, uplink and
  verification with a pre-verify / post-verify schedule.

Models are replaced by :class:`SyntheticLM`, a seeded prefix -> distribution
oracle. Rejected draft tokens are regenerated by the target directly (no
residual resampling), so only token ids cross the uplink.
"""

from __future__ import annotations

import enum
import hashlib
import heapq
import math
from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Protocol, Sequence

import numpy as np


class ContractError(ValueError):
    """Raised when an operation is called outside its documented contract."""


class VerificationMode(str, enum.Enum):
    GREEDY = "greedy"
    STOCHASTIC = "stochastic"


class Phase(str, enum.Enum):
    PRE_VERIFY = "pre_verify"
    POST_VERIFY = "post_verify"


class TokenOracle(Protocol):
    vocab_size: int

    def distribution(self, prefix: Sequence[int]) -> np.ndarray: ...


@lru_cache(maxsize=1 << 16)
def _target_probs(seed: int, vocab_size: int, logit_scale: float, key: tuple[int, ...]) -> np.ndarray:
    digest = hashlib.blake2b(repr((seed, key)).encode(), digest_size=16).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    logits = logit_scale * rng.standard_normal(vocab_size)
    logits -= logits.max()
    probs = np.exp(logits)
    probs /= probs.sum()
    probs.setflags(write=False)
    return probs


@dataclass(frozen=True)
class SyntheticLM:
    """Deterministic stand-in for a language model.

    The base distribution for a prefix is a softmax over seeded Gaussian
    logits keyed on ``(seed, len(prefix), last `context` tokens)``. A draft
    model is the same oracle mixed with the uniform distribution:
    ``(1 - smoothing) * base + smoothing / vocab_size``.
    """

    seed: int
    vocab_size: int = 64
    smoothing: float = 0.0
    logit_scale: float = 2.5
    context: int = 4

    def __post_init__(self) -> None:
        if self.vocab_size < 2:
            raise ContractError("vocab_size must be >= 2")
        if not 0.0 <= self.smoothing <= 1.0:
            raise ContractError("smoothing must lie in [0, 1]")
        if self.context < 1:
            raise ContractError("context must be >= 1")

    def distribution(self, prefix: Sequence[int]) -> np.ndarray:
        tail = tuple(int(t) for t in prefix[-self.context:])
        base = _target_probs(self.seed, self.vocab_size, float(self.logit_scale), (len(prefix),) + tail)
        if self.smoothing == 0.0:
            return base
        return (1.0 - self.smoothing) * base + self.smoothing / self.vocab_size

    def as_draft(self, smoothing: float) -> "SyntheticLM":
        return SyntheticLM(self.seed, self.vocab_size, smoothing, self.logit_scale, self.context)


@dataclass(frozen=True)
class DecodeConfig:
    gamma: int = 4
    max_tokens: int = 64
    eos_token: int | None = None
    bits_per_token: float = 16.0
    draft_flops_per_token: float = 2.7e8
    verify_flops_per_token: float = 3.2e9
    verification_mode: VerificationMode = VerificationMode.GREEDY
    # fixed cost of one target forward pass, independent of how many positions it scores
    verify_fixed_flops: float = 0.0
    prompt: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "verification_mode", VerificationMode(self.verification_mode))
        if self.gamma < 1:
            raise ContractError("gamma must be >= 1")
        if self.max_tokens < 1:
            raise ContractError("max_tokens must be >= 1")
        for name in ("bits_per_token", "draft_flops_per_token", "verify_flops_per_token"):
            if not getattr(self, name) > 0:
                raise ContractError(f"{name} must be > 0")
        if self.verify_fixed_flops < 0:
            raise ContractError("verify_fixed_flops must be >= 0")


@dataclass(frozen=True)
class LinkTiming:
    device_flops: float
    server_flops_effective: float
    uplink_rate: float
    server_queue_delay: float = 0.0

    def __post_init__(self) -> None:
        for name in ("device_flops", "server_flops_effective", "uplink_rate"):
            if not getattr(self, name) > 0:
                raise ContractError(f"{name} must be > 0")
        if self.server_queue_delay < 0:
            raise ContractError("server_queue_delay must be >= 0")


@dataclass
class LatencyBreakdown:
    mobile_compute_s: float = 0.0
    uplink_s: float = 0.0
    server_compute_s: float = 0.0
    device_idle_s: float = 0.0
    server_idle_s: float = 0.0
    total_s: float = 0.0
    tokens_out: int = 0
    rounds: int = 0
    tokens_discarded: int = 0
    queue_s: float = 0.0
    tokens_per_round: list[int] = field(default_factory=list)

    def _close(self, total: float) -> None:
        self.total_s = total
        span = total - self.queue_s
        # busy time never exceeds the span; clamp float dust
        self.device_idle_s = max(span - self.mobile_compute_s, 0.0)
        self.server_idle_s = max(span - self.server_compute_s, 0.0)

    @property
    def idle_fraction(self) -> float:
        span = self.total_s - self.queue_s
        if span <= 0:
            return 0.0
        return (self.device_idle_s + self.server_idle_s) / (2.0 * span)


def acceptance_probability(p_val: float, q_val: float) -> float:
    """Probability of keeping a draft token with target prob ``p_val`` and draft prob ``q_val``.

    ``q_val == 0`` is treated as accept: the draft sampler can never propose
    such a token.
    """
    if not (0.0 <= p_val <= 1.0 and 0.0 <= q_val <= 1.0):
        raise ContractError(f"probabilities out of range: p={p_val}, q={q_val}")
    if p_val >= q_val or q_val == 0.0:
        return 1.0
    return p_val / q_val


def sample_token(dist: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF sample; consumes exactly one ``rng.random()`` draw."""
    cdf = np.cumsum(dist)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(dist) - 1))


def verify_batch(
    target_dists: Sequence[np.ndarray],
    draft_tokens: Sequence[int],
    draft_dists: Sequence[np.ndarray],
    mode: VerificationMode | str,
    rng: np.random.Generator | None = None,
) -> tuple[int, int | None]:
    """Verify draft tokens left to right.

    Returns ``(accepted_count, replacement)``. On the first rejection at
    index ``r`` the replacement comes from ``target_dists[r]``. When every
    token is accepted and ``target_dists`` carries the extra entry, the
    replacement is the bonus token; without it the replacement is ``None``.

    In stochastic mode the rng is consumed as: one uniform per checked token,
    then one uniform for the replacement/bonus sample.
    """
    mode = VerificationMode(mode)
    n = len(draft_tokens)
    if len(draft_dists) != n or len(target_dists) not in (n, n + 1):
        raise ContractError(
            f"length mismatch: {len(target_dists)} target, {n} tokens, {len(draft_dists)} draft dists"
        )
    if mode is VerificationMode.STOCHASTIC and rng is None:
        raise ContractError("stochastic verification needs an rng")

    for i, tok in enumerate(draft_tokens):
        p = target_dists[i]
        if mode is VerificationMode.GREEDY:
            ok = tok == int(np.argmax(p))
        else:
            alpha = acceptance_probability(float(p[tok]), float(draft_dists[i][tok]))
            ok = rng.random() < alpha
        if not ok:
            return i, _pick(p, mode, rng)
    if len(target_dists) == n + 1:
        return n, _pick(target_dists[n], mode, rng)
    return n, None


def _pick(dist: np.ndarray, mode: VerificationMode, rng: np.random.Generator | None) -> int:
    if mode is VerificationMode.GREEDY:
        return int(np.argmax(dist))
    return sample_token(dist, rng)


def _draft_token(draft: TokenOracle, ctx: Sequence[int], mode: VerificationMode, rng) -> tuple[int, np.ndarray]:
    q = draft.distribution(ctx)
    if mode is VerificationMode.GREEDY:
        return int(np.argmax(q)), q
    return sample_token(q, rng), q


def _commit(out: list[int], new_tokens: Sequence[int], cfg: DecodeConfig) -> bool:
    """Append tokens, stopping at max_tokens or EOS. Returns True when decoding is finished."""
    for tok in new_tokens:
        out.append(int(tok))
        if len(out) >= cfg.max_tokens or (cfg.eos_token is not None and tok == cfg.eos_token):
            return True
    return False


def _costs(cfg: DecodeConfig, timing: LinkTiming) -> tuple[float, float, float, float]:
    draft_s = cfg.draft_flops_per_token / timing.device_flops
    upload_s = cfg.bits_per_token / timing.uplink_rate
    verify_s = cfg.verify_flops_per_token / timing.server_flops_effective
    fixed_s = cfg.verify_fixed_flops / timing.server_flops_effective
    return draft_s, upload_s, verify_s, fixed_s


def _rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def run_conventional(
    draft: TokenOracle,
    target: TokenOracle,
    cfg: DecodeConfig,
    timing: LinkTiming,
    rng=None,
) -> tuple[list[int], LatencyBreakdown]:
    rng = _rng(rng)
    draft_s, upload_s, verify_s, fixed_s = _costs(cfg, timing)
    g = cfg.gamma
    bd = LatencyBreakdown(queue_s=timing.server_queue_delay)
    t = timing.server_queue_delay
    out: list[int] = []
    done = False
    while not done:
        ctx = list(cfg.prompt) + out
        tokens: list[int] = []
        qs: list[np.ndarray] = []
        for _ in range(g):
            tok, q = _draft_token(draft, ctx + tokens, cfg.verification_mode, rng)
            tokens.append(tok)
            qs.append(q)
        t += g * draft_s
        bd.mobile_compute_s += g * draft_s
        t += g * upload_s
        bd.uplink_s += g * upload_s
        ps = [target.distribution(ctx + tokens[:i]) for i in range(g + 1)]
        cost = (g + 1) * verify_s + fixed_s
        t += cost
        bd.server_compute_s += cost
        n_acc, rep = verify_batch(ps, tokens, qs, cfg.verification_mode, rng)
        bd.rounds += 1
        bd.tokens_discarded += g - n_acc
        before = len(out)
        done = _commit(out, tokens[:n_acc] + [rep], cfg)
        bd.tokens_per_round.append(len(out) - before)
    bd.tokens_out = len(out)
    bd._close(t)
    return out, bd


def target_only_decode(
    target: TokenOracle, cfg: DecodeConfig, timing: LinkTiming
) -> tuple[list[int], LatencyBreakdown]:
    """Server-only greedy decoding; one target pass per token."""
    _, _, verify_s, fixed_s = _costs(cfg, timing)
    bd = LatencyBreakdown(queue_s=timing.server_queue_delay)
    out: list[int] = []
    done = False
    while not done:
        p = target.distribution(list(cfg.prompt) + out)
        bd.server_compute_s += verify_s + fixed_s
        bd.rounds += 1
        done = _commit(out, [int(np.argmax(p))], cfg)
        bd.tokens_per_round.append(1)
    bd.tokens_out = len(out)
    bd._close(timing.server_queue_delay + bd.server_compute_s)
    return out, bd


# ---------------------------------------------------------------------------
# parallel speculative decoding
# ---------------------------------------------------------------------------

# tie-break priority at equal timestamps: server before link before device
_SERVER, _LINK, _DEVICE = 0, 1, 2


@dataclass
class _Batch:
    start: int  # index into the pending chain of the first token
    size: int


@dataclass
class _Job:
    kind: str  # "prefill" | "check" | "verify"
    batch: _Batch | None
    duration: float
    skip_first: bool = False


class _ParallelEngine:
    def __init__(self, draft, target, cfg: DecodeConfig, timing: LinkTiming, rng):
        self.draft = draft
        self.target = target
        self.cfg = cfg
        self.rng = rng
        self.draft_s, self.upload_s, self.verify_s, self.fixed_s = _costs(cfg, timing)
        self.bd = LatencyBreakdown(queue_s=timing.server_queue_delay)
        self.events: list[tuple[float, int, int, str, int]] = []
        self.seq = 0
        self.epoch = 0
        self.now = timing.server_queue_delay
        self.out: list[int] = []
        self.done = False
        self.phase = Phase.PRE_VERIFY
        self.phase_log: list[Phase] = []

    # -- bookkeeping ------------------------------------------------------
    def _push(self, time: float, who: int, kind: str) -> None:
        heapq.heappush(self.events, (time, who, self.seq, kind, self.epoch))
        self.seq += 1

    def _enter(self, phase: Phase) -> None:
        self.phase = phase
        self.phase_log.append(phase)

    def _abort_in_flight(self) -> None:
        # charge partial work done by activities cut short
        if self.device_busy_since is not None:
            self.bd.mobile_compute_s += self.now - self.device_busy_since
        if self.link_busy_since is not None:
            self.bd.uplink_s += self.now - self.link_busy_since
        self.device_busy_since = None
        self.link_busy_since = None

    # -- phase entry ------------------------------------------------------
    def start_pre_verify(self) -> None:
        self.epoch += 1
        self._abort_in_flight()
        self._enter(Phase.PRE_VERIFY)
        self.pending: list[int] = []
        self.pending_q: list[np.ndarray] = []
        self.batch_fill = 0  # tokens drafted into the batch under construction
        self.link_queue: deque[_Batch] = deque()
        self.server_queue: deque[_Job] = deque()
        self.server_busy = False
        self.p_next: np.ndarray | None = None
        self.verified = 0  # pending tokens already committed
        self.device_paused = False
        self.device_busy_since = None
        self.link_busy_since = None
        self.link_current: _Batch | None = None
        self.server_current: _Job | None = None
        self._server_submit(_Job("prefill", None, self.verify_s + self.fixed_s))
        self._device_next()

    # -- device -----------------------------------------------------------
    def _horizon_reached(self) -> bool:
        return len(self.out) + len(self.pending) - self.verified >= self.cfg.max_tokens

    def _device_next(self) -> None:
        if self.device_paused or self._horizon_reached():
            return
        self.device_busy_since = self.now
        self._push(self.now + self.draft_s, _DEVICE, "draft")

    def _on_draft(self) -> None:
        self.bd.mobile_compute_s += self.now - self.device_busy_since
        self.device_busy_since = None
        ctx = list(self.cfg.prompt) + self.out + self.pending[self.verified:]
        tok, q = _draft_token(self.draft, ctx, self.cfg.verification_mode, self.rng)
        self.pending.append(tok)
        self.pending_q.append(q)
        self.batch_fill += 1
        if self.batch_fill == self.cfg.gamma or self._horizon_reached():
            self._link_submit(_Batch(len(self.pending) - self.batch_fill, self.batch_fill))
            self.batch_fill = 0
            if self.phase is Phase.PRE_VERIFY:
                # wait for the first-token verdict before drafting further
                self.device_paused = True
        self._device_next()

    # -- uplink -----------------------------------------------------------
    def _link_submit(self, batch: _Batch) -> None:
        self.link_queue.append(batch)
        if self.link_current is None:
            self._link_next()

    def _link_next(self) -> None:
        if not self.link_queue:
            return
        self.link_current = self.link_queue.popleft()
        self.link_busy_since = self.now
        self._push(self.now + self.link_current.size * self.upload_s, _LINK, "uplink")

    def _on_uplink(self) -> None:
        self.bd.uplink_s += self.now - self.link_busy_since
        self.link_busy_since = None
        batch, self.link_current = self.link_current, None
        if self.phase is Phase.PRE_VERIFY and batch.start == 0:
            self._server_submit(_Job("check", batch, 0.0))
        else:
            self._server_submit(_Job("verify", batch, batch.size * self.verify_s + self.fixed_s))
        self._link_next()

    # -- server -----------------------------------------------------------
    def _server_submit(self, job: _Job) -> None:
        self.server_queue.append(job)
        if not self.server_busy:
            self._server_next()

    def _server_next(self) -> None:
        while self.server_queue and not self.server_busy:
            job = self.server_queue.popleft()
            if job.duration == 0.0:
                self._complete(job)
                if self.done:
                    return
                continue
            self.server_busy = True
            self.server_current = job
            self.bd.server_compute_s += job.duration
            self._push(self.now + job.duration, _SERVER, "verify")

    def _on_server(self) -> None:
        job, self.server_current = self.server_current, None
        self.server_busy = False
        self._complete(job)
        if not self.done and self.server_current is None:
            self._server_next()

    def _complete(self, job: _Job) -> None:
        prefix = list(self.cfg.prompt) + self.out
        if job.kind == "prefill":
            self.p_next = self.target.distribution(prefix)
            return
        b = job.batch
        tokens = self.pending[b.start:b.start + b.size]
        qs = self.pending_q[b.start:b.start + b.size]
        self.bd.rounds += 1
        if job.kind == "check":
            n_acc, rep = verify_batch([self.p_next], tokens[:1], qs[:1], self.cfg.verification_mode, self.rng)
            if n_acc == 0:
                self._reject(tokens[:0], rep)
                return
            if self._accept(tokens[:1]):
                return
            # scored by the verify pass submitted below; the oracle is pure so order is immaterial
            self.p_next = self.target.distribution(prefix + tokens[:1])
            self._enter(Phase.POST_VERIFY)
            self.device_paused = False
            self._device_next()
            # the remaining tokens plus the next position still need a target pass
            self._server_submit(_Job("verify", _Batch(b.start + 1, b.size - 1), b.size * self.verify_s + self.fixed_s))
            return
        # full verify: p_next covers tokens[0], one new distribution per token
        dists = [self.p_next] + [self.target.distribution(prefix + tokens[:i + 1]) for i in range(len(tokens))]
        n_acc, rep = verify_batch(dists[:len(tokens)], tokens, qs, self.cfg.verification_mode, self.rng)
        if rep is not None:
            self._reject(tokens[:n_acc], rep)
            return
        self.p_next = dists[len(tokens)]
        self._accept(tokens)

    def _accept(self, tokens: list[int]) -> bool:
        before = len(self.out)
        self.done = _commit(self.out, tokens, self.cfg)
        self.verified += len(self.out) - before
        self.bd.tokens_per_round.append(len(self.out) - before)
        return self.done

    def _reject(self, accepted: list[int], replacement: int) -> None:
        before = len(self.out)
        self.done = _commit(self.out, accepted + [replacement], self.cfg)
        self.bd.tokens_per_round.append(len(self.out) - before)
        # everything drafted past the accepted tokens is thrown away
        self.bd.tokens_discarded += len(self.pending) - self.verified - len(accepted)
        if not self.done:
            self.start_pre_verify()

    def run(self) -> tuple[list[int], LatencyBreakdown]:
        self.device_busy_since = None
        self.link_busy_since = None
        self.start_pre_verify()
        while not self.done:
            time, _, _, kind, epoch = heapq.heappop(self.events)
            if epoch != self.epoch:
                continue
            self.now = time
            if kind == "draft":
                self._on_draft()
            elif kind == "uplink":
                self._on_uplink()
            else:
                self._on_server()
        self._abort_in_flight()
        self.bd.tokens_out = len(self.out)
        self.bd._close(self.now)
        return self.out, self.bd


def run_parallel(
    draft: TokenOracle,
    target: TokenOracle,
    cfg: DecodeConfig,
    timing: LinkTiming,
    rng=None,
) -> tuple[list[int], LatencyBreakdown]:
    tokens, bd = _run_parallel_traced(draft, target, cfg, timing, rng)[:2]
    return tokens, bd


def _run_parallel_traced(draft, target, cfg, timing, rng=None):
    engine = _ParallelEngine(draft, target, cfg, timing, _rng(rng))
    tokens, bd = engine.run()
    return tokens, bd, engine.phase_log


def expected_tokens_per_round(acceptance: float, gamma: int) -> float:
    """Expected tokens emitted by one conventional round with i.i.d. per-token acceptance."""
    if acceptance >= 1.0:
        return float(gamma + 1)
    return (1.0 - acceptance ** (gamma + 1)) / (1.0 - acceptance)


def ceil_rounds(max_tokens: int, gamma: int) -> int:
    return math.ceil(max_tokens / (gamma + 1))
