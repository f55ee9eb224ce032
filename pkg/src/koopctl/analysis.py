"""Control-theoretic diagnostics of the learned latent system.

Everything here is read-only over trained parameters: pole locations,
controllability of (A, B), one-step prediction error, and CSV exports of
the learned cost diagonals and of true-vs-predicted latent trajectories
for external embedding/plotting tools. All CSVs carry a header row and
17-significant-digit floats so reloading loses nothing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import embedding, lqr
from . import ndmath as nd
from .rl import evaluate_policy, format_float

CONTROLLABILITY_TOL = 1e-8


@dataclass
class StabilityReport:
    open_poles: list          # eigenvalues of A
    closed_poles: list        # eigenvalues of A - B G
    open_radius: float
    closed_radius: float


@dataclass
class AnalysisReport:
    poles: list
    spectral_radius: float
    controllability_rank: int
    latent_dim: int
    mean_model_error: float
    q_diagonal: list
    total_eval_cost: float


# --------------------------------------------------------------------------
# controllability and poles
# --------------------------------------------------------------------------

def controllability_matrix(model):
    """Krylov block matrix [B, AB, A^2 B, ..., A^{d-1} B], shape (d, d*m)."""
    a, b = model.A.data, model.B.data
    blocks = [b]
    for _ in range(a.shape[0] - 1):
        blocks.append(a @ blocks[-1])
    return np.hstack(blocks)


def controllability_rank(model):
    """Numerical rank of the controllability matrix of the latent system."""
    return nd.svd_rank(controllability_matrix(model), tol=CONTROLLABILITY_TOL)


def stability_report(model, sol):
    """Open- and closed-loop eigenvalues with their spectral radii.

    Pass a converged gain; a half-unrolled one reports the poles of a
    controller nobody runs.
    """
    open_poles = nd.eigvals(model.A)
    closed = model.A.data - model.B.data @ sol.G.data
    closed_poles = nd.eigvals(closed)
    return StabilityReport(
        open_poles=open_poles,
        closed_poles=closed_poles,
        open_radius=max(abs(p) for p in open_poles),
        closed_radius=max(abs(p) for p in closed_poles),
    )


def write_stability_csv(report, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("kind,index,re,im,magnitude\n")
        for kind, poles in (("open", report.open_poles),
                            ("closed", report.closed_poles)):
            for i, p in enumerate(poles):
                fh.write(",".join([
                    kind, str(i), format_float(p.real), format_float(p.imag),
                    format_float(abs(p)),
                ]) + "\n")


# --------------------------------------------------------------------------
# prediction error
# --------------------------------------------------------------------------

def eval_model_error(model, encoder, states, actions, csv_path=None):
    """Mean squared one-step latent prediction error along a trajectory.

    `states` is the visited sequence (T, n) including the initial state and
    `actions` the controls taken, (T-1, m). Writes per-step errors to
    `csv_path` when given. Equals the batch model loss on the same triples.
    """
    states = np.asarray(states, dtype=float)
    actions = np.asarray(actions, dtype=float)
    if states.ndim != 2 or states.shape[0] < 2:
        raise nd.UsageError("trajectory needs at least two states")
    if actions.shape[0] != states.shape[0] - 1:
        raise nd.DimensionError(
            f"{states.shape[0]} states need {states.shape[0] - 1} actions, "
            f"got {actions.shape[0]}"
        )
    with nd.no_grad():
        z = embedding.encode(encoder, states[:-1], "query").data
        z_next = embedding.encode(encoder, states[1:], "query").data
    pred = z @ model.A.data.T + actions @ model.B.data.T
    per_step = ((z_next - pred) ** 2).sum(axis=1)
    if csv_path is not None:
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write("step,error\n")
            for k, e in enumerate(per_step):
                fh.write(f"{k},{format_float(e)}\n")
    return float(per_step.mean())


# --------------------------------------------------------------------------
# exports
# --------------------------------------------------------------------------

def export_latent_trajectories(env, model, encoder, policy, episodes, path,
                               seed_base=0, max_steps=1000):
    """Roll the policy and write true vs one-step-predicted latents.

    Each episode contributes up to `max_steps` transition rows per kind:
    at transition k, "true" is the encoding of the next state and "pred"
    is A z_k + B u_k. The step column counts transitions globally so the
    file round-trips into a mean model error without extra bookkeeping.
    """
    d = model.A.data.shape[0]
    header = "step,kind," + ",".join(f"z_{j}" for j in range(d))
    row_id = 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for i in range(episodes):
            state = env.reset(seed_base + i)
            for _ in range(max_steps):
                u = np.asarray(policy(state), dtype=float).reshape(-1)
                next_state, _, done = env.step(state, u)
                with nd.no_grad():
                    z = embedding.encode(
                        encoder, state.reshape(1, -1), "query").data[0]
                    z_true = embedding.encode(
                        encoder, next_state.reshape(1, -1), "query").data[0]
                z_pred = model.A.data @ z + model.B.data @ u
                for kind, vec in (("true", z_true), ("pred", z_pred)):
                    fh.write(f"{row_id},{kind}," +
                             ",".join(format_float(v) for v in vec) + "\n")
                row_id += 1
                state = next_state
                if done:
                    break


def read_latent_trajectories(path):
    """Load an exported file back into (true, pred) arrays, row-aligned."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    by_kind = {"true": {}, "pred": {}}
    for line in lines[1:]:
        parts = line.split(",")
        step, kind = int(parts[0]), parts[1]
        by_kind[kind][step] = np.array([float(v) for v in parts[2:]])
    steps = sorted(by_kind["true"])
    if steps != sorted(by_kind["pred"]):
        raise nd.UsageError(f"{path}: true/pred rows are not paired")
    true = np.array([by_kind["true"][s] for s in steps]).reshape(len(steps), -1)
    pred = np.array([by_kind["pred"][s] for s in steps]).reshape(len(steps), -1)
    return true, pred


def export_learned_q(params, path):
    """Write the effective (post-softplus) cost diagonals of Q and R."""
    q, r = lqr.effective_costs(params)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("matrix,index,value\n")
        for name, diag in (("Q", np.diag(q.data)), ("R", np.diag(r.data))):
            for i, v in enumerate(diag):
                fh.write(f"{name},{i},{format_float(v)}\n")


def read_learned_q(path):
    """Load exported cost diagonals back as (q_diagonal, r_diagonal)."""
    q, r = {}, {}
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    for line in lines[1:]:
        name, idx, value = line.split(",")
        {"Q": q, "R": r}[name][int(idx)] = float(value)
    return (np.array([q[i] for i in sorted(q)]),
            np.array([r[i] for i in sorted(r)]))


# --------------------------------------------------------------------------
# the aggregate report
# --------------------------------------------------------------------------

def build_report(env, model, encoder, params, episodes, seed_base,
                 dare_iters=lqr.EVAL_DARE_ITERATIONS):
    """Evaluate a trained system and aggregate the headline diagnostics.

    Rolls the deterministic policy for `episodes` episodes, then reports
    open-loop poles, controllability, mean prediction error over the
    visited trajectories, the learned Q diagonal, and the summed quadratic
    cost of the rollouts under the learned (Q, R).
    """
    with nd.no_grad():
        sol = lqr.solve_dare(model, params, iterations=dare_iters)
        z_ref = embedding.encode(
            encoder, env.goal_state().reshape(1, -1), "query").data[0]
    results = evaluate_policy(env, encoder, sol.G.data, z_ref,
                              episodes, seed_base)

    q, r = lqr.effective_costs(params)
    q_diag, r_diag = np.diag(q.data), np.diag(r.data)
    errors, total_cost = [], 0.0
    for res in results:
        errors.append(eval_model_error(model, encoder, res.states, res.actions))
        with nd.no_grad():
            z = embedding.encode(encoder, res.states[:-1], "query").data
        dz = z - z_ref
        total_cost += float((dz ** 2 @ q_diag).sum()
                            + (res.actions ** 2 @ r_diag).sum())

    poles = nd.eigvals(model.A)
    return AnalysisReport(
        poles=poles,
        spectral_radius=max(abs(p) for p in poles),
        controllability_rank=controllability_rank(model),
        latent_dim=model.A.data.shape[0],
        mean_model_error=float(np.mean(errors)),
        q_diagonal=list(q_diag),
        total_eval_cost=total_cost,
    )


def write_report_csv(report, path):
    """Scalar report fields as a two-column CSV (poles live in stability.csv)."""
    rows = [
        ("latent_dim", str(report.latent_dim)),
        ("controllability_rank", str(report.controllability_rank)),
        ("spectral_radius", format_float(report.spectral_radius)),
        ("mean_model_error", format_float(report.mean_model_error)),
        ("total_eval_cost", format_float(report.total_eval_cost)),
    ]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("field,value\n")
        for field, value in rows:
            fh.write(f"{field},{value}\n")
