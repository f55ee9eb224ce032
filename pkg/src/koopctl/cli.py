"""Command-line front end: train, eval, analyze, export-latents.

Exit codes: 0 success, 1 lock contention, 2 invalid config or usage,
3 numeric divergence (a crash checkpoint is left behind), 4 unreadable
or corrupt checkpoint.
"""

import argparse
import os
import sys

import numpy as np

from . import analysis
from . import checkpoint
from . import embedding
from . import lqr
from . import ndmath as nd
from . import rl
from .config import ConfigError, config_from_lines, config_lines, load_config
from .envs import ENV_NAMES, SimulationError
from .rl import TrainingError, format_float

EVAL_SEED_OFFSET = 10_000   # eval episodes never reuse training reset seeds


def default_run_dir(cfg):
    root = os.environ.get("KOOPCTL_OUT", "runs")
    return os.path.join(root, f"{cfg.env}_seed{cfg.seed}")


def _collect_overrides(args):
    """Config overrides from flags that were actually given."""
    overrides = {}
    for name in ("env", "seed", "steps", "latent_dim", "dare_iters",
                 "perturb_scale", "baseline", "out"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    return overrides


def _checkpoint_base(path):
    for suffix in (".manifest", ".blob"):
        if path.endswith(suffix):
            return path[: -len(suffix)]
    return path


def _restore_trainer(ckpt_base):
    """Rebuild a Trainer from a checkpoint's embedded config snapshot."""
    _, _, cfg_text = checkpoint.load(ckpt_base)
    cfg = config_from_lines(cfg_text)
    trainer = rl.Trainer(cfg)
    trainer.load_checkpoint_state(ckpt_base, require_resumable=False)
    return trainer


def _eval_settings(args, cfg):
    episodes = args.episodes if args.episodes is not None else cfg.eval_episodes
    if episodes < 1:
        raise nd.UsageError(f"--episodes must be >= 1, got {episodes}")
    seed_base = args.seed if args.seed is not None else cfg.seed + EVAL_SEED_OFFSET
    dare_iters = (args.dare_iters if args.dare_iters is not None
                  else cfg.dare_iters_eval)
    return episodes, seed_base, dare_iters


def _out_dir_for(args, ckpt_base):
    out = args.out if args.out else (os.path.dirname(ckpt_base) or ".")
    os.makedirs(out, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------

def cmd_train(args):
    cfg = load_config(args.config, _collect_overrides(args))
    run_dir = cfg.out if cfg.out else default_run_dir(cfg)
    os.makedirs(run_dir, exist_ok=True)

    with checkpoint.RunLock(run_dir):
        with open(os.path.join(run_dir, "config.txt"), "w",
                  encoding="utf-8") as fh:
            fh.write("\n".join(config_lines(cfg)) + "\n")

        if cfg.baseline:
            return _train_baseline(cfg, run_dir)

        resume_from = None
        if args.resume:
            for name in ("ckpt_latest", "ckpt_final"):
                candidate = os.path.join(run_dir, name)
                if os.path.exists(candidate + ".manifest"):
                    resume_from = candidate
                    break
            if resume_from is None:
                raise checkpoint.CheckpointError(
                    f"--resume: no checkpoint found under {run_dir}")

        try:
            run = rl.train(cfg, run_dir, resume_from=resume_from)
        except (nd.NumericError, TrainingError, SimulationError) as err:
            print(f"error: {err}", file=sys.stderr)
            crash = os.path.join(run_dir, "ckpt_crash")
            if os.path.exists(crash + ".manifest"):
                print(f"crash checkpoint: {crash}", file=sys.stderr)
            return 3

    from . import figures
    figures.render_all(run_dir)
    print(f"trained {run.steps_done} steps over {run.episodes} episodes")
    print(f"run directory: {run_dir}")
    return 0


def _train_baseline(cfg, run_dir):
    run = rl.train_two_stage_baseline(
        cfg, run_dir, eval_seed_base=cfg.seed + EVAL_SEED_OFFSET)
    run.trainer.save_checkpoint(os.path.join(run_dir, "ckpt_final"))

    eval_path = os.path.join(run_dir, "baseline_eval.csv")
    with open(eval_path, "w", encoding="utf-8") as fh:
        fh.write("episode,return,steps\n")
        for i, res in enumerate(run.eval_results):
            fh.write(f"{i},{format_float(res.episode_return)},"
                     f"{len(res.actions)}\n")

    returns = np.array(run.eval_returns)
    print(f"baseline return {returns.mean():.3f} ± {returns.std():.3f} "
          f"over {len(returns)} episodes")
    print(f"model error {format_float(run.model_error)}")
    print(f"run directory: {run_dir}")
    return 0


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------

def cmd_eval(args):
    base = _checkpoint_base(args.checkpoint)
    trainer = _restore_trainer(base)
    episodes, seed_base, dare_iters = _eval_settings(args, trainer.cfg)
    if args.perturb_scale:
        if args.perturb_scale < 0:
            raise nd.UsageError("--perturb-scale must be >= 0")
        rl.perturb_model(trainer.agent.model, args.perturb_scale,
                         trainer.streams.perturb)

    results = rl.eval_agent(trainer, trainer.env, episodes, seed_base,
                            dare_iters)

    out_dir = _out_dir_for(args, base)
    eval_path = os.path.join(out_dir, "eval.csv")
    with open(eval_path, "w", encoding="utf-8") as fh:
        fh.write("episode,return,steps\n")
        for i, res in enumerate(results):
            fh.write(f"{i},{format_float(res.episode_return)},"
                     f"{len(res.actions)}\n")

    returns = np.array([res.episode_return for res in results])
    print(f"return {returns.mean():.3f} ± {returns.std():.3f} "
          f"over {episodes} episodes (seed base {seed_base})")
    print(f"per-episode returns: {eval_path}")
    return 0


# --------------------------------------------------------------------------
# analyze
# --------------------------------------------------------------------------

def cmd_analyze(args):
    base = _checkpoint_base(args.checkpoint)
    trainer = _restore_trainer(base)
    cfg = trainer.cfg
    episodes, seed_base, dare_iters = _eval_settings(args, cfg)
    agent = trainer.agent
    out_dir = _out_dir_for(args, base)

    report = analysis.build_report(trainer.env, agent.model, agent.encoder,
                                   agent.lqr_params, episodes, seed_base,
                                   dare_iters=dare_iters)
    analysis.write_report_csv(report, os.path.join(out_dir, "report.csv"))

    with nd.no_grad():
        sol = lqr.solve_dare(agent.model, agent.lqr_params,
                             iterations=dare_iters)
    stability = analysis.stability_report(agent.model, sol)
    analysis.write_stability_csv(stability,
                                 os.path.join(out_dir, "stability.csv"))
    analysis.export_learned_q(agent.lqr_params,
                              os.path.join(out_dir, "learned_q.csv"))

    # one deterministic rollout for the per-step prediction-error profile
    rollout = rl.eval_agent(trainer, trainer.env, 1, seed_base, dare_iters)[0]
    analysis.eval_model_error(agent.model, agent.encoder, rollout.states,
                              rollout.actions,
                              csv_path=os.path.join(out_dir, "model_error.csv"))

    from . import figures
    rendered = figures.render_all(out_dir)

    print(f"latent_dim = {report.latent_dim}")
    print(f"controllability_rank = {report.controllability_rank}")
    print(f"spectral_radius = {format_float(report.spectral_radius)}")
    print(f"mean_model_error = {format_float(report.mean_model_error)}")
    print(f"total_eval_cost = {format_float(report.total_eval_cost)}")
    for name in ("report.csv", "stability.csv", "learned_q.csv",
                 "model_error.csv"):
        print(f"wrote: {os.path.join(out_dir, name)}")
    for path in rendered:
        print(f"wrote: {path}")
    return 0


# --------------------------------------------------------------------------
# export-latents
# --------------------------------------------------------------------------

def cmd_export_latents(args):
    base = _checkpoint_base(args.checkpoint)
    trainer = _restore_trainer(base)
    episodes, seed_base, dare_iters = _eval_settings(args, trainer.cfg)
    agent, env = trainer.agent, trainer.env
    out_dir = _out_dir_for(args, base)

    with nd.no_grad():
        sol = lqr.solve_dare(agent.model, agent.lqr_params,
                             iterations=dare_iters)
        goal = env.goal_state().reshape(1, -1)
        z_ref = embedding.encode(agent.encoder, goal, "query").data[0]
    gain = sol.G.data

    def policy(state):
        with nd.no_grad():
            z = embedding.encode(agent.encoder, state.reshape(1, -1),
                                 "query").data[0]
        return np.tanh(-gain @ (z - z_ref))

    latents_path = os.path.join(out_dir, "latents.csv")
    analysis.export_latent_trajectories(env, agent.model, agent.encoder,
                                        policy, episodes, latents_path,
                                        seed_base=seed_base,
                                        max_steps=env.max_steps)

    from . import figures
    rendered = figures.render_all(out_dir)
    print(f"wrote: {latents_path}")
    for path in rendered:
        print(f"wrote: {path}")
    return 0


# --------------------------------------------------------------------------
# parser / dispatch
# --------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="koopctl",
        description="Task-oriented Koopman control: train a latent linear "
                    "model with an LQR policy end-to-end, then evaluate and "
                    "analyze the result.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser(
        "train", help="train an agent (or the two-stage baseline)")
    p_train.add_argument("--config", help="key = value config file")
    p_train.add_argument("--seed", type=int, help="master RNG seed")
    p_train.add_argument("--out", help="run directory (default "
                         "$KOOPCTL_OUT-or-./runs/<env>_seed<seed>)")
    p_train.add_argument("--steps", type=int, help="total environment steps")
    p_train.add_argument("--env", choices=sorted(ENV_NAMES))
    p_train.add_argument("--latent-dim", dest="latent_dim", type=int)
    p_train.add_argument("--dare-iters", dest="dare_iters", type=int,
                         help="unrolled Riccati iterations during training")
    p_train.add_argument("--baseline", action="store_true", default=None,
                         help="two-stage pipeline: identify, then control")
    p_train.add_argument("--perturb-scale", dest="perturb_scale", type=float,
                         help="relative Frobenius perturbation of the "
                              "identified model (baseline stage 2)")
    p_train.add_argument("--resume", action="store_true",
                         help="continue from the latest checkpoint in --out")
    p_train.set_defaults(func=cmd_train)

    def checkpoint_command(name, help_text, func):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("checkpoint",
                       help="checkpoint base path (with or without extension)")
        p.add_argument("--episodes", type=int,
                       help="evaluation episodes (default: config)")
        p.add_argument("--seed", type=int,
                       help="evaluation reset seed base "
                            "(default: config seed + 10000)")
        p.add_argument("--dare-iters", dest="dare_iters", type=int,
                       help="Riccati iterations for the evaluation gain "
                            "(default: config eval setting)")
        p.add_argument("--out", help="output directory "
                                     "(default: the checkpoint's directory)")
        p.set_defaults(func=func)
        return p

    p_eval = checkpoint_command(
        "eval", "deterministic evaluation of a checkpoint", cmd_eval)
    p_eval.add_argument("--perturb-scale", dest="perturb_scale", type=float,
                        help="perturb the loaded model at this relative "
                             "Frobenius scale before evaluating")
    checkpoint_command("analyze", "spectral/controllability/cost report "
                                  "with figures", cmd_analyze)
    checkpoint_command("export-latents", "true vs predicted latent "
                                         "trajectories", cmd_export_latents)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except checkpoint.LockError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except checkpoint.CheckpointError as err:
        print(f"error: {err}", file=sys.stderr)
        return 4
    except (nd.NumericError, TrainingError, SimulationError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 3
    except (nd.UsageError, nd.DimensionError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
