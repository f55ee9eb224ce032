"""Build-once training artifacts for the slow acceptance checks.

The swing-up, robustness, and latent-dimension acceptance tests consume
checkpoints that take minutes-to-hours to train. This module owns their
layout under acceptance_runs/ (override with KOOPCTL_ACCEPT_ROOT) and
builds anything missing on demand, so `pytest tests/test_acceptance.py`
is self-sufficient — but slow on a cold tree. Pre-populate in the
background with:

    python3 tests/acceptance_artifacts.py

Re-running skips everything that already exists.
"""

import os
import sys
import time

import numpy as np

from koopctl import analysis, cli, rl

ROOT = os.environ.get("KOOPCTL_ACCEPT_ROOT") or os.path.join(
    os.path.dirname(os.path.dirname(os.path.abspath(__file__))),
    "acceptance_runs")

PENDULUM_SEEDS = (0, 1, 2)
PENDULUM_STEPS = 100_000
CARTPOLE_SEEDS = (0, 1, 2, 3, 4)  # 0-2 score the return target; all five
CARTPOLE_STEPS = 300_000          # feed the robustness comparison
PERTURB_SCALES = (1e-4, 1e-3, 1e-2)
EVAL_EPISODES = 10


def _log(msg):
    print(f"[acceptance] {msg}", flush=True)


def _finished(run_dir):
    return os.path.exists(os.path.join(run_dir, "ckpt_final.manifest"))


def _train(run_dir, *flags):
    if _finished(run_dir):
        return run_dir
    started = time.time()
    argv = ["train", "--out", run_dir] + [str(f) for f in flags]
    _log("training " + run_dir)
    rc = cli.main(argv)
    if rc != 0:
        raise RuntimeError(f"training {run_dir} exited with {rc}")
    _log(f"finished {run_dir} in {time.time() - started:.0f}s")
    return run_dir


def restore(run_dir):
    return cli._restore_trainer(os.path.join(run_dir, "ckpt_final"))


def eval_episodes(run_dir, episodes=EVAL_EPISODES, perturb_scale=0.0):
    """Deterministic converged-gain evaluation of a finished run."""
    trainer = restore(run_dir)
    if perturb_scale:
        rl.perturb_model(trainer.agent.model, perturb_scale,
                         trainer.streams.perturb)
    return rl.eval_agent(trainer, trainer.env, episodes,
                         trainer.cfg.seed + cli.EVAL_SEED_OFFSET,
                         trainer.cfg.dare_iters_eval)


# ------------------------------------------------------------- swing-up

def pendulum_run(seed):
    return _train(os.path.join(ROOT, f"pendulum_seed{seed}"),
                  "--env", "pendulum", "--seed", seed,
                  "--steps", PENDULUM_STEPS)


def pendulum_stats(seed):
    """Per-episode pendulum hold quality, cached as swingup.csv.

    Columns: episode, return, max |theta| over the final 100 steps.
    """
    run_dir = pendulum_run(seed)
    path = os.path.join(run_dir, "swingup.csv")
    if not os.path.exists(path):
        rows = []
        for i, res in enumerate(eval_episodes(run_dir)):
            final_theta = np.abs(res.states[-100:, 0]).max()
            rows.append((i, res.episode_return, final_theta))
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("episode,return,max_abs_theta_final100\n")
            for i, ret, theta in rows:
                fh.write(f"{i},{ret!r},{theta!r}\n")
    out = np.loadtxt(path, delimiter=",", skiprows=1).reshape(-1, 3)
    return out[:, 1], out[:, 2]


def cartpole_run(seed):
    return _train(os.path.join(ROOT, f"cartpole_seed{seed}"),
                  "--env", "cartpole", "--seed", seed,
                  "--steps", CARTPOLE_STEPS)


def cartpole_returns(seed):
    run_dir = cartpole_run(seed)
    path = os.path.join(run_dir, "returns.csv")
    if not os.path.exists(path):
        results = eval_episodes(run_dir)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("episode,return\n")
            for i, res in enumerate(results):
                fh.write(f"{i},{res.episode_return!r}\n")
    out = np.loadtxt(path, delimiter=",", skiprows=1).reshape(-1, 2)
    return out[:, 1]


# ----------------------------------------------------- latent-dim probe

def trained_rank(seed=0):
    trainer = restore(cartpole_run(seed))
    return analysis.controllability_rank(trainer.agent.model)


def dim_run(latent_dim):
    return _train(os.path.join(ROOT, f"cartpole_dim{latent_dim}"),
                  "--env", "cartpole", "--seed", 0,
                  "--steps", CARTPOLE_STEPS, "--latent-dim", latent_dim)


def dim_returns(latent_dim, episodes=EVAL_EPISODES):
    run_dir = dim_run(latent_dim)
    path = os.path.join(run_dir, "returns.csv")
    if not os.path.exists(path):
        results = eval_episodes(run_dir, episodes)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("episode,return\n")
            for i, res in enumerate(results):
                fh.write(f"{i},{res.episode_return!r}\n")
    out = np.loadtxt(path, delimiter=",", skiprows=1).reshape(-1, 2)
    return out[:, 1]


# ------------------------------------------------------------ robustness

def baseline_run(seed, scale):
    run_dir = os.path.join(ROOT, f"baseline_seed{seed}_scale{scale:g}")
    return _train(run_dir, "--env", "cartpole", "--seed", seed,
                  "--baseline", "--perturb-scale", scale)


def baseline_mean_return(seed, scale):
    run_dir = baseline_run(seed, scale)
    path = os.path.join(run_dir, "baseline_eval.csv")
    out = np.loadtxt(path, delimiter=",", skiprows=1).reshape(-1, 3)
    return float(out[:, 1].mean())


def robustness_table():
    """mean return per (kind, seed, perturbation scale), cached at the root.

    kind "agent" evaluates the end-to-end checkpoints with the model
    perturbed at load time; kind "baseline" trains the two-stage pipeline
    with the same perturbation applied to its identified model.
    """
    path = os.path.join(ROOT, "robustness.csv")
    if not os.path.exists(path):
        scales = (0.0,) + PERTURB_SCALES
        rows = []
        for seed in CARTPOLE_SEEDS:
            for scale in scales:
                rets = [r.episode_return
                        for r in eval_episodes(cartpole_run(seed),
                                               perturb_scale=scale)]
                rows.append(("agent", seed, scale, float(np.mean(rets))))
                _log(f"agent seed {seed} scale {scale:g}: {rows[-1][3]:.1f}")
        for seed in CARTPOLE_SEEDS:
            for scale in scales:
                rows.append(("baseline", seed, scale,
                             baseline_mean_return(seed, scale)))
                _log(f"baseline seed {seed} scale {scale:g}: "
                     f"{rows[-1][3]:.1f}")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("kind,seed,scale,mean_return\n")
            for kind, seed, scale, ret in rows:
                fh.write(f"{kind},{seed},{scale!r},{ret!r}\n")

    table = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh.read().splitlines()[1:]:
            kind, seed, scale, ret = line.split(",")
            table[(kind, int(seed), float(scale))] = float(ret)
    return table


def main():
    os.makedirs(ROOT, exist_ok=True)
    for seed in PENDULUM_SEEDS:
        returns, thetas = pendulum_stats(seed)
        _log(f"pendulum seed {seed}: return {returns.mean():.1f}, "
             f"episodes holding |theta|<0.2: {(thetas < 0.2).sum()}/10")
    for seed in CARTPOLE_SEEDS:
        rets = cartpole_returns(seed)
        _log(f"cartpole seed {seed}: mean return {rets.mean():.1f}")
    rank = trained_rank()
    _log(f"controllability rank of cartpole seed 0: {rank}")
    for dim in (rank, max(1, rank - 2)):
        rets = dim_returns(dim)
        _log(f"cartpole at latent dim {dim}: mean return {rets.mean():.1f}")
    robustness_table()
    _log("all artifacts ready under " + ROOT)


if __name__ == "__main__":
    sys.exit(main())
