"""Client-side local training rules and server aggregation for FedSMOO and
the baseline federated optimizers (FedAvg, FedAdam, SCAFFOLD, FedCM, FedDyn,
FedSAM, MoFedSAM).

All rules share one strategy surface: a local round consumes a client state,
the server broadcast and a batch stream and returns (ClientReturn, new
state); a server round folds the sorted returns into a new ServerState.
Reductions are bit-exact: FedSMOO with r=0 walks the same float sequence as
FedDyn, FedSAM with r=0 the same as FedAvg.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .numerics import Batch, ParamVector, grad
from .sam_core import (
    PerturbState,
    corrected_perturbation,
    dual_mu_update,
    global_perturbation,
    vanilla_sam_perturbation,
)

__all__ = [
    "ALGORITHMS",
    "COMM_VECTORS",
    "HyperParams",
    "ClientState",
    "ServerState",
    "ClientReturn",
    "Broadcast",
    "DivergenceError",
    "fedsmoo_local_round",
    "fedsmoo_server_round",
    "baseline_local_round",
    "baseline_server_round",
    "local_round",
    "server_round",
    "dual_lambda_update",
]

ALGORITHMS = (
    "fedavg",
    "fedadam",
    "scaffold",
    "fedcm",
    "feddyn",
    "fedsam",
    "mofedsam",
    "fedsmoo",
)

# (download, upload) parameter-sized vectors per active client per round.
COMM_VECTORS = {
    "fedavg": (1, 1),
    "fedadam": (1, 1),
    "feddyn": (1, 1),
    "fedsam": (1, 1),
    "fedcm": (2, 1),
    "mofedsam": (2, 1),
    "scaffold": (2, 2),
    "fedsmoo": (2, 2),
}

DIVERGENCE_NORM = 1e8


class DivergenceError(RuntimeError):
    """Raised when local parameters blow up, with (round, client, step) context."""

    def __init__(self, message, round_idx=None, client_id=None, step=None):
        super().__init__(message)
        self.round_idx = round_idx
        self.client_id = client_id
        self.step = step

    def with_round(self, round_idx) -> "DivergenceError":
        return DivergenceError(
            f"round {round_idx}: {self.args[0]}", round_idx, self.client_id, self.step
        )


@dataclass(frozen=True)
class HyperParams:
    """Optimizer settings shared across the strategies.

    ``eta`` is the base local learning rate; the engine applies the
    per-round exponential decay and hands the decayed rate to the round
    functions. ``beta`` is the proximal coefficient of the dynamic
    regularizer, ``r`` the perturbation radius, ``alpha_cm`` the client-level
    momentum mixing weight.
    """

    eta: float = 0.1
    eta_decay: float = 1.0
    beta: float = 10.0
    r: float = 0.1
    K: int = 1
    batch_size: int = 50
    T: int = 1
    m: int = 1
    n: int = 1
    server_lr: float = 0.1
    alpha_cm: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-3
    disable_proximal: bool = False

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be > 0")
        if not 0 < self.eta_decay <= 1:
            raise ValueError("eta_decay must be in (0, 1]")
        if self.beta <= 0:
            raise ValueError("beta must be > 0")
        if self.r < 0:
            raise ValueError("r must be >= 0")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.T < 0:
            raise ValueError("T must be >= 0")
        if not 1 <= self.n <= self.m:
            raise ValueError("need 1 <= n <= m")
        if not 0 <= self.alpha_cm <= 1:
            raise ValueError("alpha_cm must be in [0, 1]")


@dataclass
class ClientState:
    """Per-client persistent record; all vectors start at zero."""

    client_id: int
    lambda_i: ParamVector
    perturb: PerturbState
    control_variate: ParamVector
    last_seen_round: int = -1

    @classmethod
    def fresh(cls, client_id, d, layer_shapes=(), r=0.0):
        zero = ParamVector.zeros(d, layer_shapes)
        return cls(
            client_id=client_id,
            lambda_i=zero,
            perturb=PerturbState(mu=zero, s_global=zero, radius=r),
            control_variate=zero,
        )


@dataclass
class ServerState:
    """Global model plus every strategy's server-side vector, all dimension d."""

    w: ParamVector
    lambda_g: ParamVector
    s: ParamVector
    c: ParamVector
    momentum: ParamVector
    adam_m: ParamVector
    adam_v: ParamVector

    @classmethod
    def fresh(cls, w0: ParamVector):
        zero = ParamVector.zeros(w0.d, w0.layer_shapes)
        return cls(
            w=w0, lambda_g=zero, s=zero, c=zero, momentum=zero, adam_m=zero, adam_v=zero
        )


@dataclass(frozen=True)
class Broadcast:
    """What the server ships to an active client at round start."""

    w: ParamVector
    s: ParamVector | None = None
    c: ParamVector | None = None
    momentum: ParamVector | None = None


@dataclass(frozen=True)
class ClientReturn:
    """What a client ships back: the local model plus strategy payloads."""

    client_id: int
    w_i: ParamVector
    tilde_s: ParamVector | None = None
    control_delta: ParamVector | None = None
    upload_vector_count: int = 1


def _guard(values, client_id, step):
    if not np.all(np.isfinite(values)):
        raise DivergenceError(
            f"client {client_id} produced non-finite parameters at local step {step}",
            client_id=client_id,
            step=step,
        )
    if np.linalg.norm(values) > DIVERGENCE_NORM:
        raise DivergenceError(
            f"client {client_id} parameter norm exceeded {DIVERGENCE_NORM:g} at local step {step}",
            client_id=client_id,
            step=step,
        )


def dual_lambda_update(lambda_i: ParamVector, w_i: ParamVector, w_t: ParamVector, beta: float) -> ParamVector:
    """Model-consensus dual step: lambda_i <- lambda_i - (w_i - w_t) / beta."""
    return lambda_i.like(lambda_i.values - (w_i.values - w_t.values) / beta)


def fedsmoo_local_round(state, model, w_t, s_t, hyper, batches, eta):
    """K proximal SAM steps with the consensus-corrected perturbation.

    Per step: take the stochastic gradient, correct it into the ascent
    offset, advance the perturbation dual, re-evaluate the gradient at the
    perturbed point (same batch) and descend with the dynamic-regularized
    step. Afterwards the perturbation summary mu - s_hat and the updated
    model dual are produced.
    """
    perturb = PerturbState(mu=state.perturb.mu, s_global=s_t, radius=hyper.r)
    w = w_t.values.copy()
    last_s_hat = s_t.like(np.zeros_like(s_t.values))
    for k in range(hyper.K):
        batch = next(batches)
        g = grad(model, w_t.like(w), batch)
        s_hat = corrected_perturbation(g, perturb)
        perturb = dual_mu_update(perturb, s_hat)
        g_hat = grad(model, w_t.like(w + s_hat.values), batch)
        w = w - eta * (g_hat.values - state.lambda_i.values + (w - w_t.values) / hyper.beta)
        _guard(w, state.client_id, k)
        last_s_hat = s_hat
    w_i = w_t.like(w)
    tilde_s = perturb.mu - last_s_hat
    new_lambda = dual_lambda_update(state.lambda_i, w_i, w_t, hyper.beta)
    new_state = replace(state, lambda_i=new_lambda, perturb=perturb)
    ret = ClientReturn(
        client_id=state.client_id,
        w_i=w_i,
        tilde_s=tilde_s,
        upload_vector_count=COMM_VECTORS["fedsmoo"][1],
    )
    return ret, new_state


def fedsmoo_server_round(server, returns, hyper, m):
    """Aggregate: refresh the global perturbation, advance the global dual
    against the full population count, then set w = mean(w_i) - beta*lambda.
    """
    if not returns:
        raise ValueError("server round needs at least one client return")
    returns = sorted(returns, key=lambda ret: ret.client_id)
    n = len(returns)
    w_stack = np.stack([ret.w_i.values for ret in returns])
    w_bar = w_stack.mean(axis=0)
    s_new = global_perturbation([ret.tilde_s for ret in returns], hyper.r)
    drift_sum = (w_stack - server.w.values).sum(axis=0)
    lambda_new = server.lambda_g.like(server.lambda_g.values - drift_sum / (hyper.beta * m))
    w_new = server.w.like(w_bar - hyper.beta * lambda_new.values)
    return replace(server, w=w_new, lambda_g=lambda_new, s=s_new)


def baseline_local_round(kind, state, model, broadcast, hyper, batches, eta):
    """Dispatch the K-step local loop for one of the baseline strategies."""
    if kind not in ALGORITHMS or kind == "fedsmoo":
        raise ValueError(f"unknown baseline kind {kind!r}")
    w_t = broadcast.w
    w = w_t.values.copy()
    lam = state.lambda_i.values
    c_i = state.control_variate.values
    payload_control = None

    for k in range(hyper.K):
        batch = next(batches)
        g = grad(model, w_t.like(w), batch)

        if kind in ("fedavg", "fedadam"):
            w = w - eta * g.values
        elif kind == "fedsam":
            s_hat = vanilla_sam_perturbation(g, hyper.r)
            g_hat = grad(model, w_t.like(w + s_hat.values), batch)
            w = w - eta * g_hat.values
        elif kind == "mofedsam":
            s_hat = vanilla_sam_perturbation(g, hyper.r)
            g_hat = grad(model, w_t.like(w + s_hat.values), batch)
            step_dir = hyper.alpha_cm * g_hat.values + (1.0 - hyper.alpha_cm) * broadcast.momentum.values
            w = w - eta * step_dir
        elif kind == "fedcm":
            step_dir = hyper.alpha_cm * g.values + (1.0 - hyper.alpha_cm) * broadcast.momentum.values
            w = w - eta * step_dir
        elif kind == "feddyn":
            if hyper.disable_proximal:
                w = w - eta * g.values
            else:
                w = w - eta * (g.values - lam + (w - w_t.values) / hyper.beta)
        elif kind == "scaffold":
            w = w - eta * (g.values - c_i + broadcast.c.values)
        _guard(w, state.client_id, k)

    w_i = w_t.like(w)
    new_state = state
    if kind == "feddyn" and not hyper.disable_proximal:
        new_state = replace(state, lambda_i=dual_lambda_update(state.lambda_i, w_i, w_t, hyper.beta))
    elif kind == "scaffold":
        c_plus = c_i - broadcast.c.values + (w_t.values - w) / (hyper.K * eta)
        payload_control = state.control_variate.like(c_plus - c_i)
        new_state = replace(state, control_variate=state.control_variate.like(c_plus))

    ret = ClientReturn(
        client_id=state.client_id,
        w_i=w_i,
        control_delta=payload_control,
        upload_vector_count=COMM_VECTORS[kind][1],
    )
    return ret, new_state


def baseline_server_round(kind, server, returns, hyper, m, eta):
    """Aggregate one baseline round; ``eta`` is the decayed local rate the
    clients just used (SCAFFOLD/FedCM normalize their server vectors by it).
    """
    if not returns:
        raise ValueError("server round needs at least one client return")
    returns = sorted(returns, key=lambda ret: ret.client_id)
    n = len(returns)
    w_stack = np.stack([ret.w_i.values for ret in returns])
    w_bar = w_stack.mean(axis=0)

    if kind in ("fedavg", "fedsam"):
        return replace(server, w=server.w.like(w_bar))
    if kind == "feddyn":
        if hyper.disable_proximal:
            return replace(server, w=server.w.like(w_bar))
        drift_sum = (w_stack - server.w.values).sum(axis=0)
        lambda_new = server.lambda_g.like(server.lambda_g.values - drift_sum / (hyper.beta * m))
        w_new = server.w.like(w_bar - hyper.beta * lambda_new.values)
        return replace(server, w=w_new, lambda_g=lambda_new)
    if kind == "scaffold":
        delta_bar = np.mean(np.stack([ret.control_delta.values for ret in returns]), axis=0)
        c_new = server.c.like(server.c.values + (n / m) * delta_bar)
        return replace(server, w=server.w.like(w_bar), c=c_new)
    if kind in ("fedcm", "mofedsam"):
        momentum_new = server.momentum.like((w_bar - server.w.values) / (hyper.K * eta))
        return replace(server, w=server.w.like(w_bar), momentum=momentum_new)
    if kind == "fedadam":
        pseudo = w_bar - server.w.values
        m_new = hyper.adam_beta1 * server.adam_m.values + (1.0 - hyper.adam_beta1) * pseudo
        v_new = hyper.adam_beta2 * server.adam_v.values + (1.0 - hyper.adam_beta2) * pseudo * pseudo
        w_new = server.w.values + hyper.server_lr * m_new / (np.sqrt(v_new) + hyper.adam_eps)
        return replace(
            server,
            w=server.w.like(w_new),
            adam_m=server.adam_m.like(m_new),
            adam_v=server.adam_v.like(v_new),
        )
    raise ValueError(f"unknown baseline kind {kind!r}")


def local_round(kind, state, model, broadcast, hyper, batches, eta):
    """Uniform entry point used by the round loop."""
    if kind == "fedsmoo":
        return fedsmoo_local_round(state, model, broadcast.w, broadcast.s, hyper, batches, eta)
    return baseline_local_round(kind, state, model, broadcast, hyper, batches, eta)


def server_round(kind, server, returns, hyper, m, eta):
    """Uniform server entry point used by the round loop."""
    if kind == "fedsmoo":
        return fedsmoo_server_round(server, returns, hyper, m)
    return baseline_server_round(kind, server, returns, hyper, m, eta)
