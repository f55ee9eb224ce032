"""Soft actor-critic over the latent LQR policy, plus the two-stage baseline.

The training loop alternates environment steps with sequential gradient
applications per update:

  1. critic regression toward the entropy-regularised bootstrap target
     (updates both critics and, CURL-style, the query encoder),
  2. actor loss E[alpha*logpi - min Q] through the unrolled DARE
     (updates cost diagonals, log_std, A, B, and the query encoder),
  3. contrastive loss (updates the query encoder and the bilinear form),
  4. latent model loss on detached encodings (updates A and B only),

followed by the key-encoder and critic-target EMA moves and one gradient
step on the entropy temperature. The routing is deliberately sequential so
every loss's parameter set is independently checkable.

Raw states live in the replay buffer and are encoded per batch, so encodings
never go stale as the encoder trains.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt
from . import embedding, koopman, lqr
from . import ndmath as nd
from .config import ConfigError, config_lines
from .envs import SimulationError, make_env
from .optim import Adam
from .seeding import STREAM_NAMES, RunStreams

METRICS_COLUMNS = ("step", "episode", "return", "loss_sac", "loss_cst",
                   "loss_m", "model_error", "wall_ms")
ALPHA_INIT = 0.1
CRITIC_HIDDEN = 64


class TrainingError(RuntimeError):
    """A loss went non-finite or the simulation diverged."""


# --------------------------------------------------------------------------
# replay buffer
# --------------------------------------------------------------------------

class ReplayBuffer:
    """Preallocated FIFO ring over raw-state transitions."""

    def __init__(self, capacity, state_dim, control_dim):
        self.capacity = capacity
        self.x = np.zeros((capacity, state_dim))
        self.u = np.zeros((capacity, control_dim))
        self.x_next = np.zeros((capacity, state_dim))
        self.r = np.zeros(capacity)
        self.d = np.zeros(capacity)
        self.size = 0
        self.cursor = 0

    def push(self, x, u, x_next, r, d):
        fields_ = (np.asarray(x), np.asarray(u), np.asarray(x_next), r, d)
        if not all(np.all(np.isfinite(f)) for f in fields_):
            raise TrainingError("non-finite transition rejected by replay buffer")
        if d not in (0, 1, 0.0, 1.0, True, False):
            raise TrainingError(f"done flag must be 0/1, got {d!r}")
        i = self.cursor
        self.x[i] = x
        self.u[i] = u
        self.x_next[i] = x_next
        self.r[i] = r
        self.d[i] = float(d)
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch, seed):
        """Uniform with replacement over filled slots; deterministic per seed.

        `seed` is an integer or a Generator (training passes its stream).
        """
        if self.size == 0:
            raise nd.UsageError("cannot sample from an empty replay buffer")
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        idx = rng.integers(0, self.size, size=batch)
        return {
            "x": self.x[idx],
            "u": self.u[idx],
            "x_next": self.x_next[idx],
            "r": self.r[idx],
            "d": self.d[idx],
        }

    def contents(self):
        """All filled transitions in insertion order (oldest first)."""
        if self.size < self.capacity:
            order = np.arange(self.size)
        else:
            order = np.concatenate([
                np.arange(self.cursor, self.capacity),
                np.arange(self.cursor),
            ])
        return {
            "x": self.x[order],
            "u": self.u[order],
            "x_next": self.x_next[order],
            "r": self.r[order],
            "d": self.d[order],
        }


# --------------------------------------------------------------------------
# critics
# --------------------------------------------------------------------------

@dataclass
class CriticPair:
    q1: list
    q2: list
    t1: list   # EMA targets, never on the tape
    t2: list


def init_critics(latent_dim, control_dim, rng):
    def net(trainable):
        return embedding.init_layers(
            [latent_dim + control_dim, CRITIC_HIDDEN, CRITIC_HIDDEN, 1],
            rng, trainable,
        )

    q1, q2 = net(True), net(True)
    t1 = [(nd.Tensor(w.data.copy()), nd.Tensor(b.data.copy())) for w, b in q1]
    t2 = [(nd.Tensor(w.data.copy()), nd.Tensor(b.data.copy())) for w, b in q2]
    return CriticPair(q1=q1, q2=q2, t1=t1, t2=t2)


def critic_forward(layers, z, u):
    h = nd.concat([z, u], axis=1)
    for w, b in layers[:-1]:
        h = nd.tanh(nd.affine(h, w, b))
    w, b = layers[-1]
    return nd.affine(h, w, b)          # (batch, 1)


def critic_ema(critics, tau):
    for main, target in ((critics.q1, critics.t1), (critics.q2, critics.t2)):
        for (w, b), (tw, tb) in zip(main, target):
            tw.data = tau * tw.data + (1.0 - tau) * w.data
            tb.data = tau * tb.data + (1.0 - tau) * b.data


def critic_tensors(critics):
    out = {}
    for tag, layers in (("q1", critics.q1), ("q2", critics.q2),
                        ("t1", critics.t1), ("t2", critics.t2)):
        for i, (w, b) in enumerate(layers):
            out[f"critic.{tag}.{i}.w"] = w
            out[f"critic.{tag}.{i}.b"] = b
    return out


def critic_target(r, d, z_next, critics, sample_action, alpha, gamma):
    """Entropy-regularised bootstrap y = r + gamma (1-d) (min Q-bar - alpha log pi).

    `sample_action(z_next) -> (u', log pi(u'|z'))` draws from the current
    actor. Everything here is plain values — the target is tape-detached by
    construction.
    """
    with nd.no_grad():
        u_next, log_pi = sample_action(z_next)
        q1 = critic_forward(critics.t1, z_next, u_next).data[:, 0]
        q2 = critic_forward(critics.t2, z_next, u_next).data[:, 0]
    soft_value = np.minimum(q1, q2) - alpha * log_pi.data
    return r + gamma * (1.0 - d) * soft_value


# --------------------------------------------------------------------------
# agent bundle
# --------------------------------------------------------------------------

@dataclass
class Agent:
    encoder: embedding.EncoderParams
    model: koopman.KoopmanModel
    lqr_params: lqr.LqrParams
    log_std: nd.Tensor
    critics: CriticPair
    alpha_raw: nd.Tensor
    latent_dim: int
    control_dim: int

    def alpha(self):
        return float(np.exp(self.alpha_raw.data[0]))

    def tensors(self):
        out = {}
        out.update(embedding.encoder_tensors(self.encoder))
        out.update(koopman.model_tensors(self.model))
        out.update(lqr.lqr_tensors(self.lqr_params, self.log_std))
        out.update(critic_tensors(self.critics))
        out["alpha.raw"] = self.alpha_raw
        return out


def init_agent(state_dim, control_dim, latent_dim, dare_iters, rng):
    return Agent(
        encoder=embedding.init_encoder(state_dim, latent_dim, rng),
        model=koopman.init_model(latent_dim, control_dim, rng),
        lqr_params=lqr.init_params(latent_dim, control_dim, iterations=dare_iters),
        log_std=nd.Tensor(np.zeros(control_dim), requires_grad=True),
        critics=init_critics(latent_dim, control_dim, rng),
        alpha_raw=nd.Tensor(np.array([np.log(ALPHA_INIT)]), requires_grad=True),
        latent_dim=latent_dim,
        control_dim=control_dim,
    )


def build_optimizers(agent, cfg):
    enc_params = embedding.trainable_encoder_tensors(agent.encoder)
    return {
        "critic": Adam(
            [p for layer in agent.critics.q1 + agent.critics.q2 for p in layer],
            lr=cfg.lr_critic,
        ),
        "actor": Adam(
            [agent.lqr_params.q_raw, agent.lqr_params.r_raw, agent.log_std],
            lr=cfg.lr_actor,
        ),
        "koopman": Adam([agent.model.A, agent.model.B], lr=cfg.lr_koopman),
        "encoder": Adam(enc_params, lr=cfg.lr_encoder),
        "similarity": Adam([agent.encoder.similarity_W], lr=cfg.lr_encoder),
        "alpha": Adam([agent.alpha_raw], lr=cfg.lr_alpha),
    }


@dataclass
class LossReport:
    loss_sac: float
    loss_cst: float
    loss_m: float
    loss_critic: float
    loss_actor: float
    alpha: float


@dataclass
class CachedPolicy:
    """Plain-value snapshot of gain, reference, and noise scale for acting."""
    G: np.ndarray
    z_ref: np.ndarray
    log_std: np.ndarray


# --------------------------------------------------------------------------
# trainer
# --------------------------------------------------------------------------

class Trainer:
    def __init__(self, cfg, run_dir=None):
        env = make_env(cfg.env)
        if cfg.control_dim != env.action_dim:
            raise ConfigError(
                "control_dim",
                f"{cfg.env} has control dimension {env.action_dim}",
            )
        self.cfg = cfg
        self.run_dir = run_dir
        self.env = env
        self.streams = RunStreams(cfg.seed)
        self.agent = init_agent(
            self.env.state_dim, self.env.action_dim, cfg.latent_dim,
            cfg.dare_iters, self.streams.init,
        )
        self.opts = build_optimizers(self.agent, cfg)
        self.buffer = ReplayBuffer(cfg.buffer_capacity, self.env.state_dim,
                                   self.env.action_dim)
        self.goal = self.env.goal_state().reshape(1, -1)
        self.step_count = 0
        self.episode_count = 0
        self.metrics_rows = 0
        self.policy = None   # CachedPolicy, refreshed after every update
        self.target_entropy = -float(self.env.action_dim)
        # in-flight episode (checkpointed so resume is exact mid-episode)
        self.cur_state = None
        self.ep_return = 0.0
        self.ep_transitions = []   # [(x, u, x_next), ...] this episode
        self.ep_losses = []        # [(loss_sac, loss_cst, loss_m), ...]
        self._all_params = [
            p for p in self.agent.tensors().values() if p.requires_grad
        ]

    # -- policy plumbing ----------------------------------------------------

    def _z_ref_tensor(self):
        """Reference latent on the tape (goal-encode mode) or zeros."""
        if self.cfg.z_ref_mode == "zero":
            return nd.Tensor(np.zeros((1, self.agent.latent_dim)))
        return embedding.encode(self.agent.encoder, self.goal, "query")

    def refresh_policy(self):
        with nd.no_grad():
            sol = lqr.solve_dare(self.agent.model, self.agent.lqr_params)
            z_ref = self._z_ref_tensor()
        self.policy = CachedPolicy(
            G=sol.G.data.copy(),
            z_ref=z_ref.data.reshape(-1).copy(),
            log_std=np.clip(self.agent.log_std.data, lqr.LOG_STD_MIN,
                            lqr.LOG_STD_MAX).copy(),
        )

    def _encode_np(self, x):
        with nd.no_grad():
            return embedding.encode(self.agent.encoder, x, "query").data

    def act(self, state, deterministic=False):
        """Control from the cached policy; samples use the actor stream."""
        if self.policy is None:
            self.refresh_policy()
        z = self._encode_np(state.reshape(1, -1))[0]
        mean = -self.policy.G @ (z - self.policy.z_ref)
        if deterministic:
            return np.tanh(mean)
        eps = self.streams.actor.standard_normal(self.env.action_dim)
        return np.tanh(mean + np.exp(self.policy.log_std) * eps)

    def _sample_action_values(self, z_batch):
        """Actor draw for critic targets, on cached-policy values."""
        sol = lqr.LqrSolution(
            P=nd.Tensor(np.zeros((self.agent.latent_dim, self.agent.latent_dim))),
            G=nd.Tensor(self.policy.G),
        )
        return lqr.policy_sample(
            sol, z_batch, nd.Tensor(self.policy.z_ref.reshape(1, -1)),
            nd.Tensor(self.policy.log_std), self.streams.actor,
        )

    # -- the four-phase update ----------------------------------------------

    def _zero_all(self):
        for p in self._all_params:
            p.grad = None

    def _check_finite(self, loss_value, name):
        if not np.isfinite(loss_value):
            raise TrainingError(f"{name} went non-finite ({loss_value})")

    def update_step(self, batch):
        agent, cfg = self.agent, self.cfg
        if self.policy is None:
            self.refresh_policy()

        # key encoder and critic targets must never be trainable
        for w, b in agent.encoder.key:
            assert not w.requires_grad and not b.requires_grad
        for layers in (agent.critics.t1, agent.critics.t2):
            for w, b in layers:
                assert not w.requires_grad and not b.requires_grad

        x = batch["x"]
        u_taken = nd.Tensor(batch["u"])
        alpha_value = agent.alpha()

        # (1a) critic regression toward the bootstrap target; the critic loss
        # backpropagates through z into the encoder — this is the encoder's
        # task-loss signal
        with nd.no_grad():
            z_next_values = embedding.encode(agent.encoder, batch["x_next"], "query")
        y = critic_target(
            batch["r"], batch["d"], z_next_values, agent.critics,
            self._sample_action_values, alpha_value, cfg.gamma,
        )
        z_values = embedding.encode(agent.encoder, x, "query")
        q1 = critic_forward(agent.critics.q1, z_values, u_taken)
        q2 = critic_forward(agent.critics.q2, z_values, u_taken)
        y_t = nd.Tensor(y.reshape(-1, 1))
        loss_critic = nd.add(
            nd.tmean(nd.square(nd.sub(q1, y_t))),
            nd.tmean(nd.square(nd.sub(q2, y_t))),
        )
        self._check_finite(loss_critic.data, "critic loss")
        self._zero_all()
        loss_critic.backward()
        self.opts["critic"].step()
        self.opts["encoder"].step()

        # (1b) actor: maximize min Q of the reparameterized policy action.
        # As in standard SAC the critic's state input is data, so the critics
        # see a detached copy of z; the gradient reaches q_raw, r_raw, A, B
        # and the encoder through the action u = tanh(-G(z - z_ref) + noise)
        # and its log-density. Differentiating Q's state input as well lets
        # the actor inflate the latent scale to milk the critics until the
        # model regression can no longer track it.
        z = embedding.encode(agent.encoder, x, "query")
        z_ref = self._z_ref_tensor()
        sol = lqr.solve_dare(agent.model, agent.lqr_params)
        u_pi, log_pi = lqr.policy_sample(sol, z, z_ref, agent.log_std,
                                         self.streams.actor)
        z_data = nd.Tensor(z.data.copy())
        q1 = critic_forward(agent.critics.q1, z_data, u_pi)
        q2 = critic_forward(agent.critics.q2, z_data, u_pi)
        q_min = nd.reshape(nd.minimum(q1, q2), (x.shape[0],))
        loss_actor = nd.tmean(nd.sub(nd.mul(log_pi, alpha_value), q_min))
        self._check_finite(loss_actor.data, "actor loss")
        log_pi_values = log_pi.data.copy()
        self._zero_all()
        loss_actor.backward()
        self.opts["actor"].step()
        self.opts["koopman"].step()
        self.opts["encoder"].step()

        # (2) contrastive alignment of two augmentations
        x_q = embedding.augment(x, cfg.noise_scale, self.streams.augment)
        x_k = embedding.augment(x, cfg.noise_scale, self.streams.augment)
        z_q = embedding.encode(agent.encoder, x_q, "query")
        z_k = embedding.encode(agent.encoder, x_k, "key")
        loss_cst = embedding.contrastive_loss(
            embedding.LatentBatch(z_q, z_k), agent.encoder.similarity_W
        )
        self._check_finite(loss_cst.data, "contrastive loss")
        self._zero_all()
        loss_cst.backward()
        self.opts["encoder"].step()
        self.opts["similarity"].step()

        # (3) latent model regression on detached encodings
        with nd.no_grad():
            z_detached = embedding.encode(agent.encoder, x, "query")
            z_next_detached = embedding.encode(agent.encoder, batch["x_next"], "query")
        loss_m = koopman.model_loss(agent.model, z_detached, u_taken, z_next_detached)
        self._check_finite(loss_m.data, "model loss")
        self._zero_all()
        loss_m.backward()
        self.opts["koopman"].step()

        # EMA moves and temperature
        embedding.momentum_update(agent.encoder, cfg.ema_tau)
        critic_ema(agent.critics, cfg.critic_tau)
        loss_alpha = self.update_temperature(log_pi_values)

        self.refresh_policy()
        return LossReport(
            loss_sac=float(loss_critic.data + loss_actor.data),
            loss_cst=float(loss_cst.data),
            loss_m=float(loss_m.data),
            loss_critic=float(loss_critic.data),
            loss_actor=float(loss_actor.data),
            alpha=agent.alpha(),
        )

    def update_temperature(self, log_pi_values):
        """Step alpha toward the entropy target: loss = alpha (-log pi - H*)."""
        coeff = float(np.mean(-log_pi_values - self.target_entropy))
        loss = nd.mul(nd.exp(self.agent.alpha_raw), coeff)
        self._zero_all()
        loss.sum().backward()
        self.opts["alpha"].step()
        return float(loss.data[0])

    # -- model diagnostics ----------------------------------------------------

    def latent_model_error(self, x, u, x_next):
        """Mean squared one-step latent residual on given transitions."""
        if len(x) == 0:
            return 0.0
        with nd.no_grad():
            z = embedding.encode(self.agent.encoder, np.asarray(x), "query")
            z_next = embedding.encode(self.agent.encoder, np.asarray(x_next), "query")
            loss = koopman.model_loss(self.agent.model, z, nd.Tensor(np.asarray(u)), z_next)
        return float(loss.data)

    # -- persistence ----------------------------------------------------------

    def state_tensors(self, include_buffer=True):
        out = {name: t.data for name, t in self.agent.tensors().items()}
        for name, opt in self.opts.items():
            out[f"opt.{name}.t"] = np.array(float(opt.t))
            for i, m in enumerate(opt.m):
                out[f"opt.{name}.m.{i}"] = m
            for i, v in enumerate(opt.v):
                out[f"opt.{name}.v.{i}"] = v
        for name in STREAM_NAMES:
            out[f"rng.{name}"] = self.streams.state_array(name)
        if include_buffer:
            # raw slot order (not insertion order) so cursor alignment — and
            # therefore the sampled indices after resume — is preserved exactly
            size = self.buffer.size
            for key in ("x", "u", "x_next", "r", "d"):
                out[f"buffer.{key}"] = getattr(self.buffer, key)[:size]
        if self.cur_state is not None:
            out["episode.state"] = self.cur_state
            out["episode.return"] = np.array(self.ep_return)
            out["episode.x"] = np.array([t[0] for t in self.ep_transitions]).reshape(
                len(self.ep_transitions), self.env.state_dim)
            out["episode.u"] = np.array([t[1] for t in self.ep_transitions]).reshape(
                len(self.ep_transitions), self.env.action_dim)
            out["episode.x_next"] = np.array(
                [t[2] for t in self.ep_transitions]).reshape(
                len(self.ep_transitions), self.env.state_dim)
            out["episode.losses"] = np.array(self.ep_losses).reshape(
                len(self.ep_losses), 3)
        return out

    def save_checkpoint(self, base_path, include_buffer=True):
        meta = {
            "step": self.step_count,
            "episode": self.episode_count,
            "metrics_rows": self.metrics_rows,
            "buffer_size": self.buffer.size,
            "buffer_cursor": self.buffer.cursor,
            "has_buffer": int(include_buffer),
            "episode_active": int(self.cur_state is not None),
        }
        ckpt.save(base_path, self.state_tensors(include_buffer), meta,
                  config_lines(self.cfg))

    def load_checkpoint_state(self, base_path, require_resumable=True):
        """Restore from a checkpoint.

        With `require_resumable=False` (evaluation/analysis), optimizer,
        RNG, buffer, and episode state are restored only if present;
        parameter tensors are always mandatory.
        """
        tensors, meta, _cfg_lines = ckpt.load(base_path)
        own = self.agent.tensors()
        for name, tensor in own.items():
            if name not in tensors:
                raise ckpt.CheckpointError(f"checkpoint missing tensor {name!r}")
            if tensors[name].shape != tensor.data.shape:
                raise ckpt.CheckpointError(
                    f"tensor {name!r} shape {tensors[name].shape} != {tensor.data.shape}"
                )
            tensor.data = tensors[name]
        have_opt_state = any(n.startswith("opt.") for n in tensors)
        if require_resumable and not have_opt_state:
            raise ckpt.CheckpointError(
                "checkpoint has no optimizer state; cannot resume training from it"
            )
        if have_opt_state:
            for name, opt in self.opts.items():
                opt.set_state({
                    "t": tensors[f"opt.{name}.t"],
                    "m": [tensors[f"opt.{name}.m.{i}"] for i in range(len(opt.m))],
                    "v": [tensors[f"opt.{name}.v.{i}"] for i in range(len(opt.v))],
                })
        for name in STREAM_NAMES:
            if f"rng.{name}" in tensors:
                self.streams.load_state_array(name, tensors[f"rng.{name}"])
            elif require_resumable:
                raise ckpt.CheckpointError(
                    f"checkpoint is missing RNG stream state {name!r}"
                )
        if int(meta.get("has_buffer", "0")):
            size = int(meta["buffer_size"])
            if size > self.buffer.capacity:
                raise ckpt.CheckpointError(
                    f"checkpoint buffer holds {size} transitions, over capacity"
                )
            for key in ("x", "u", "x_next", "r", "d"):
                getattr(self.buffer, key)[:size] = tensors[f"buffer.{key}"]
            self.buffer.size = size
            self.buffer.cursor = int(meta["buffer_cursor"])
        elif require_resumable and int(meta["step"]) < self.cfg.steps:
            raise ckpt.CheckpointError(
                "checkpoint has no replay buffer; cannot resume training from it"
            )
        if int(meta.get("episode_active", "0")):
            self.cur_state = tensors["episode.state"]
            self.ep_return = float(tensors["episode.return"])
            self.ep_transitions = [
                (tensors["episode.x"][i], tensors["episode.u"][i],
                 tensors["episode.x_next"][i])
                for i in range(tensors["episode.x"].shape[0])
            ]
            self.ep_losses = [tuple(row) for row in tensors["episode.losses"]]
        else:
            self.cur_state = None
            self.ep_return = 0.0
            self.ep_transitions = []
            self.ep_losses = []
        self.step_count = int(meta["step"])
        self.episode_count = int(meta["episode"])
        self.metrics_rows = int(meta["metrics_rows"])
        self.refresh_policy()
        return meta


# --------------------------------------------------------------------------
# metrics file
# --------------------------------------------------------------------------

def format_float(v):
    return f"{v:.17g}"


def metrics_header():
    return ",".join(METRICS_COLUMNS)


def metrics_row(step, episode, ret, report_means, model_error, wall_ms):
    vals = [str(step), str(episode), format_float(ret),
            format_float(report_means[0]), format_float(report_means[1]),
            format_float(report_means[2]), format_float(model_error),
            format_float(wall_ms)]
    return ",".join(vals)


def _truncate_metrics(path, rows):
    """Keep the header plus the first `rows` data rows (resume support)."""
    if not os.path.exists(path):
        return
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines[:1 + rows]))
        if lines[:1 + rows]:
            fh.write("\n")


# --------------------------------------------------------------------------
# training loops
# --------------------------------------------------------------------------

@dataclass
class TrainingRun:
    cfg: object
    trainer: Trainer
    metrics_path: str
    steps_done: int
    episodes: int
    eval_returns: list = field(default_factory=list)
    eval_results: list = field(default_factory=list)
    model_error: float = float("nan")
    gain: np.ndarray = None
    z_ref: np.ndarray = None


def train(cfg, run_dir, resume_from=None):
    """Full SAC run; writes metrics.csv and checkpoints under run_dir.

    On numeric divergence a crash checkpoint (`ckpt_crash`) is saved and the
    error re-raised for the CLI to map to its exit code.
    """
    os.makedirs(run_dir, exist_ok=True)
    trainer = Trainer(cfg, run_dir)
    metrics_path = os.path.join(run_dir, "metrics.csv")

    if resume_from is not None:
        trainer.load_checkpoint_state(resume_from)
        _truncate_metrics(metrics_path, trainer.metrics_rows)
        metrics_fh = open(metrics_path, "a", encoding="utf-8")
    else:
        metrics_fh = open(metrics_path, "w", encoding="utf-8")
        metrics_fh.write(metrics_header() + "\n")
        metrics_fh.flush()

    try:
        _train_loop(trainer, metrics_fh, run_dir)
    except (nd.NumericError, SimulationError, TrainingError):
        trainer.save_checkpoint(os.path.join(run_dir, "ckpt_crash"))
        raise
    finally:
        metrics_fh.close()

    trainer.save_checkpoint(os.path.join(run_dir, "ckpt_final"))
    return TrainingRun(
        cfg=cfg, trainer=trainer, metrics_path=metrics_path,
        steps_done=trainer.step_count, episodes=trainer.episode_count,
    )


def _train_loop(trainer, metrics_fh, run_dir):
    cfg = trainer.cfg
    env = trainer.env
    ep_start = time.perf_counter()
    next_checkpoint = (trainer.step_count // cfg.checkpoint_every + 1) \
        * cfg.checkpoint_every

    while trainer.step_count < cfg.steps:
        if trainer.cur_state is None:
            reset_seed = int(trainer.streams.env.integers(0, 2**63 - 1))
            trainer.cur_state = env.reset(reset_seed)
            trainer.ep_return = 0.0
            trainer.ep_transitions = []
            trainer.ep_losses = []
            ep_start = time.perf_counter()

        if trainer.step_count < cfg.warmup_steps:
            action = trainer.streams.actor.uniform(-1.0, 1.0, env.action_dim)
        else:
            action = trainer.act(trainer.cur_state)

        state = trainer.cur_state
        next_state, reward, done_physics = env.step(state, action)
        time_limit = len(trainer.ep_transitions) + 1 >= env.max_steps
        done_flag = 1.0 if (done_physics or time_limit) else 0.0
        trainer.buffer.push(state, action, next_state, reward, done_flag)
        trainer.ep_transitions.append((state, action, next_state))
        trainer.ep_return += reward
        trainer.cur_state = next_state
        trainer.step_count += 1

        if trainer.step_count > cfg.warmup_steps:
            batch = trainer.buffer.sample(cfg.batch_size, trainer.streams.buffer)
            report = trainer.update_step(batch)
            trainer.ep_losses.append(
                (report.loss_sac, report.loss_cst, report.loss_m))

        if done_physics or time_limit:
            trainer.episode_count += 1
            wall_ms = (time.perf_counter() - ep_start) * 1000.0
            if trainer.ep_losses:
                means = (
                    float(np.mean([l[0] for l in trainer.ep_losses])),
                    float(np.mean([l[1] for l in trainer.ep_losses])),
                    float(np.mean([l[2] for l in trainer.ep_losses])),
                )
            else:
                means = (0.0, 0.0, 0.0)
            xs = np.array([t[0] for t in trainer.ep_transitions])
            us = np.array([t[1] for t in trainer.ep_transitions])
            xns = np.array([t[2] for t in trainer.ep_transitions])
            model_err = trainer.latent_model_error(xs, us, xns)
            metrics_fh.write(metrics_row(
                trainer.step_count, trainer.episode_count, trainer.ep_return,
                means, model_err, wall_ms,
            ) + "\n")
            metrics_fh.flush()
            trainer.metrics_rows += 1
            trainer.cur_state = None
            trainer.ep_transitions = []
            trainer.ep_losses = []

        if trainer.step_count >= next_checkpoint:
            trainer.save_checkpoint(os.path.join(run_dir, "ckpt_latest"))
            next_checkpoint += cfg.checkpoint_every


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

@dataclass
class EpisodeResult:
    episode_return: float
    states: np.ndarray    # (steps + 1, state_dim), initial state included
    actions: np.ndarray   # (steps, control_dim)


def evaluate_policy(env, encoder, gain, z_ref, episodes, seed_base,
                    squash=True):
    """Deterministic rollouts of u = -G (psi(x) - z_ref); no exploration noise.

    Episode i resets with seed seed_base + i, so evaluations of different
    checkpoints pair up for common-random-number comparisons.
    """
    results = []
    for i in range(episodes):
        state = env.reset(seed_base + i)
        states, actions = [state], []
        total = 0.0
        for _ in range(env.max_steps):
            with nd.no_grad():
                z = embedding.encode(encoder, state.reshape(1, -1), "query").data[0]
            u = -gain @ (z - z_ref)
            if squash:
                u = np.tanh(u)
            state, reward, done = env.step(state, u)
            states.append(state)
            actions.append(u)
            total += reward
            if done:
                break
        results.append(EpisodeResult(
            episode_return=total,
            states=np.array(states),
            actions=np.array(actions),
        ))
    return results


def eval_agent(trainer_or_agent, env, episodes, seed_base, dare_iters):
    """Converged-DARE deterministic evaluation of a trained agent."""
    agent = getattr(trainer_or_agent, "agent", trainer_or_agent)
    with nd.no_grad():
        sol = lqr.solve_dare(agent.model, agent.lqr_params, iterations=dare_iters)
        goal = env.goal_state().reshape(1, -1)
        z_ref = embedding.encode(agent.encoder, goal, "query").data[0]
    return evaluate_policy(env, agent.encoder, sol.G.data, z_ref,
                           episodes, seed_base)


# --------------------------------------------------------------------------
# two-stage baseline
# --------------------------------------------------------------------------

def train_two_stage_baseline(cfg, run_dir=None, eval_seed_base=10_000):
    """Model-first pipeline: identify, then control with hand-set costs.

    Stage 1 collects random-policy data and trains the encoder
    contrastively (optional) and (A, B) by the latent model loss, then
    refits (A, B) in closed form on everything collected. Stage 2 freezes
    all of it, optionally perturbs (A, B) by a relative Frobenius-scale
    Gaussian, and runs a converged-DARE LQR with the configured diagonal
    costs.
    """
    trainer = Trainer(cfg, run_dir)
    env, agent, streams = trainer.env, trainer.agent, trainer.streams

    # stage 1: random data
    state = None
    ep_len = 0
    for _ in range(cfg.baseline_data_steps):
        if state is None:
            state = env.reset(int(streams.env.integers(0, 2**63 - 1)))
            ep_len = 0
        action = streams.actor.uniform(-1.0, 1.0, env.action_dim)
        next_state, reward, done_physics = env.step(state, action)
        ep_len += 1
        time_limit = ep_len >= env.max_steps
        trainer.buffer.push(state, action, next_state, reward,
                            1.0 if (done_physics or time_limit) else 0.0)
        state = None if (done_physics or time_limit) else next_state

    # stage 1: representation + model (no task loss anywhere)
    for _ in range(cfg.baseline_train_iters):
        batch = trainer.buffer.sample(cfg.batch_size, streams.buffer)
        if cfg.baseline_use_cst:
            x_q = embedding.augment(batch["x"], cfg.noise_scale, streams.augment)
            x_k = embedding.augment(batch["x"], cfg.noise_scale, streams.augment)
            z_q = embedding.encode(agent.encoder, x_q, "query")
            z_k = embedding.encode(agent.encoder, x_k, "key")
            loss_cst = embedding.contrastive_loss(
                embedding.LatentBatch(z_q, z_k), agent.encoder.similarity_W
            )
            trainer._check_finite(loss_cst.data, "baseline contrastive loss")
            trainer._zero_all()
            loss_cst.backward()
            trainer.opts["encoder"].step()
            trainer.opts["similarity"].step()
            embedding.momentum_update(agent.encoder, cfg.ema_tau)

        with nd.no_grad():
            z = embedding.encode(agent.encoder, batch["x"], "query")
            z_next = embedding.encode(agent.encoder, batch["x_next"], "query")
        loss_m = koopman.model_loss(agent.model, z, nd.Tensor(batch["u"]), z_next)
        trainer._check_finite(loss_m.data, "baseline model loss")
        trainer._zero_all()
        loss_m.backward()
        trainer.opts["koopman"].step()

    # closed-form polish of (A, B) on all collected data
    data = trainer.buffer.contents()
    with nd.no_grad():
        z_all = embedding.encode(agent.encoder, data["x"], "query").data
        z_next_all = embedding.encode(agent.encoder, data["x_next"], "query").data
    fitted = koopman.fit_least_squares(z_all, data["u"], z_next_all,
                                       ridge=koopman.DEFAULT_RIDGE)
    agent.model.A.data = fitted.A.data
    agent.model.B.data = fitted.B.data

    # optional model perturbation (exact relative Frobenius scale)
    if cfg.perturb_scale > 0.0:
        perturb_model(agent.model, cfg.perturb_scale, streams.perturb)

    # stage 2: frozen model, fixed costs, converged gain, raw LQR action
    fixed = lqr.LqrParams(
        q_raw=nd.Tensor(np.full(cfg.latent_dim,
                                _inv_softplus(cfg.baseline_q_diag - 1e-6))),
        r_raw=nd.Tensor(np.full(env.action_dim,
                                _inv_softplus(cfg.baseline_r_diag - 1e-6))),
        z_ref=nd.Tensor(np.zeros(cfg.latent_dim)),
        iterations=cfg.dare_iters_eval,
    )
    with nd.no_grad():
        sol = lqr.solve_dare(agent.model, fixed)
        z_ref = embedding.encode(agent.encoder, env.goal_state().reshape(1, -1),
                                 "query").data[0]
    results = evaluate_policy(env, agent.encoder, sol.G.data, z_ref,
                              cfg.eval_episodes, eval_seed_base, squash=False)

    model_err = trainer.latent_model_error(data["x"], data["u"], data["x_next"])
    return TrainingRun(
        cfg=cfg, trainer=trainer,
        metrics_path="", steps_done=cfg.baseline_data_steps,
        episodes=len(results),
        eval_returns=[r.episode_return for r in results],
        eval_results=results,
        model_error=model_err,
        gain=sol.G.data.copy(),
        z_ref=z_ref.copy(),
    )


def perturb_model(model, scale, rng):
    """Add a Gaussian direction to A and B at an exact relative
    Frobenius scale: ||A' - A||_F / ||A||_F == scale. In place."""
    for tensor in (model.A, model.B):
        direction = rng.standard_normal(tensor.data.shape)
        norm = np.linalg.norm(direction)
        if norm > 0:
            tensor.data = tensor.data + (
                scale * np.linalg.norm(tensor.data) / norm
            ) * direction


def _inv_softplus(y):
    if y <= 0:
        raise nd.UsageError("diagonal must be positive")
    return float(np.log(np.expm1(y)))
