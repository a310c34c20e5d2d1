#! /usr/bin/env python
"""
neural.py
A small float64 neural engine with hand-written backpropagation: MLPs,
FiLM conditioning, a tanh-squashed Gaussian actor, twin soft actor-critic
updates, dual replay buffers with hindsight relabeling, a finite-difference
gradient check and pickled checkpoints.
"""

import logging
import pickle
from dataclasses import dataclass, fields

import numpy as np

from greenroute import __version__
from greenroute.core import ScenarioError, TrainingError
from greenroute.simplex import project_rows, project_rows_backward
from greenroute.utils import return_filename

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 'greenroute-sac'
CHECKPOINT_VERSION = 1
LOG_2PI = np.log(2. * np.pi)


@dataclass(frozen=True)
class SacConfig:
    actor_hidden: int = 128
    critic_hidden: int = 256
    film_hidden: int = 64
    gamma: float = 0.95
    tau: float = 0.005
    actor_lr: float = 3e-4
    critic_lr: float = 1e-3
    alpha_lr: float = 3e-4
    alpha: float = None
    initial_alpha: float = 0.01
    target_entropy: float = None
    batch_size: int = 64
    replay_capacity: int = 20000
    cross_capacity: int = 5000
    cross_fraction: float = 0.3
    imitation_lr: float = 3e-3
    use_film: bool = True

    @classmethod
    def from_dict(cls, data):
        data = dict(data or {})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ScenarioError(['sac: unknown keys %s' % unknown])
        return cls(**data)


################################
#                              #
#  Optimizer                   #
#                              #
################################

class Adam:
    """Adaptive-moment updates applied in place to a list of arrays."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1. - self.beta1 ** self.t
        c2 = 1. - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1. - self.beta1) * g
            v *= self.beta2
            v += (1. - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


################################
#                              #
#  Mlp Class                   #
#                              #
################################

class Mlp:
    """
    Fully connected network. Hidden layers use a rectified-linear (or
    identity) activation and may be FiLM-modulated after the activation;
    the head is linear or tanh.
    """

    def __init__(self, sizes, rng, head='linear', activation='relu', head_scale=1.):
        if head not in ('linear', 'tanh'):
            raise ValueError("head must be 'linear' or 'tanh'")
        if activation not in ('relu', 'linear'):
            raise ValueError("activation must be 'relu' or 'linear'")
        self.sizes = tuple(int(s) for s in sizes)
        self.head = head
        self.activation = activation
        self.weights = []
        self.biases = []
        n_layers = len(self.sizes) - 1
        for i, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            scale = np.sqrt(2. / a) if i < n_layers - 1 else head_scale / np.sqrt(a)
            self.weights.append(rng.standard_normal((a, b)) * scale)
            self.biases.append(np.zeros(b))

    def __repr__(self):
        return 'Mlp(%s, head=%s)' % ('-'.join(str(s) for s in self.sizes), self.head)

    @property
    def hidden_widths(self):
        return self.sizes[1:-1]

    def parameters(self):
        params = []
        for w, b in zip(self.weights, self.biases):
            params += [w, b]
        return params

    def named_parameters(self, prefix=''):
        named = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            named += [('%sW%i' % (prefix, i), w), ('%sb%i' % (prefix, i), b)]
        return named

    def copy(self):
        other = Mlp.__new__(Mlp)
        other.sizes = self.sizes
        other.head = self.head
        other.activation = self.activation
        other.weights = [w.copy() for w in self.weights]
        other.biases = [b.copy() for b in self.biases]
        return other

    def forward(self, x, film=None):
        """Returns (output, cache). `film` is a list of (gamma, beta) per hidden layer."""
        h = x
        cache = []
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            if i < last:
                a = np.maximum(z, 0.) if self.activation == 'relu' else z
                out = a
                if film is not None:
                    gamma, beta = film[i]
                    out = gamma * a + beta
                cache.append((h, z, a))
                h = out
            else:
                cache.append((h, z, None))
                h = np.tanh(z) if self.head == 'tanh' else z
        return h, (cache, film, h)

    def backward(self, cache, grad_out):
        """Returns (parameter grads, input grad, FiLM grads [(d_gamma, d_beta)])."""
        layers, film, out = cache
        grads = [None] * (2 * len(self.weights))
        film_grads = [None] * (len(self.weights) - 1)
        g = grad_out
        for i in range(len(self.weights) - 1, -1, -1):
            h, z, a = layers[i]
            if i == len(self.weights) - 1:
                dz = g * (1. - out ** 2) if self.head == 'tanh' else g
            else:
                if film is not None:
                    gamma, _ = film[i]
                    film_grads[i] = (g * a, g)
                    g = g * gamma
                dz = g * (z > 0) if self.activation == 'relu' else g
            grads[2 * i] = h.T @ dz
            grads[2 * i + 1] = dz.sum(axis=0)
            g = dz @ self.weights[i].T
        return grads, g, film_grads

    def check_objective(self, rng, batch=4):
        x = rng.standard_normal((batch, self.sizes[0]))
        v = rng.standard_normal((batch, self.sizes[-1]))

        def objective(with_grads=True):
            out, cache = self.forward(x)
            loss = float(np.sum(out * v))
            if not with_grads:
                return loss
            return loss, self.backward(cache, v)[0]
        return objective


################################
#                              #
#  FiLM                        #
#                              #
################################

class FilmGenerator:
    """
    Maps a context vector to one (gamma, beta) pair per modulated hidden
    layer, with gamma = 1 + delta so a zero output is the identity.
    """

    def __init__(self, context_dim, widths, rng, hidden=64, head_scale=0.1):
        self.context_dim = int(context_dim)
        self.widths = tuple(int(w) for w in widths)
        self.net = Mlp([self.context_dim, hidden, 2 * sum(self.widths)], rng,
                       head_scale=head_scale)

    def __repr__(self):
        return 'FilmGenerator(context=%i, widths=%s)' % (self.context_dim, self.widths)

    def parameters(self):
        return self.net.parameters()

    def named_parameters(self, prefix=''):
        return self.net.named_parameters(prefix)

    def forward(self, context):
        context = np.atleast_2d(context)
        if context.shape[-1] != self.context_dim:
            raise ValueError('context has %i features, generator expects %i' %
                             (context.shape[-1], self.context_dim))
        out, cache = self.net.forward(context)
        film = []
        start = 0
        for w in self.widths:
            gamma = 1. + out[:, start:start + w]
            beta = out[:, start + w:start + 2 * w]
            film.append((gamma, beta))
            start += 2 * w
        return film, cache

    def backward(self, cache, film_grads):
        d_out = np.concatenate([np.concatenate([dg, db], axis=1)
                                for dg, db in film_grads], axis=1)
        return self.net.backward(cache, d_out)[0]

    def check_objective(self, rng, batch=4):
        context = rng.standard_normal((batch, self.context_dim))
        vs = [(rng.standard_normal((batch, w)), rng.standard_normal((batch, w)))
              for w in self.widths]

        def objective(with_grads=True):
            film, cache = self.forward(context)
            loss = float(sum(np.sum(g * vg) + np.sum(b * vb)
                             for (g, b), (vg, vb) in zip(film, vs)))
            if not with_grads:
                return loss
            return loss, self.backward(cache, vs)
        return objective


def identity_film(widths, batch=1):
    return [(np.ones((batch, w)), np.zeros((batch, w))) for w in widths]


################################
#                              #
#  GaussianActor Class         #
#                              #
################################

class GaussianActor:
    """
    Policy over flattened plan logits: an MLP trunk emits a mean and a
    bounded log standard deviation per action; samples are tanh-squashed.
    """
    LOG_STD_MIN = -5.
    LOG_STD_MAX = 2.

    def __init__(self, input_dim, action_dim, context_dim, rng, hidden=128,
                 use_film=True, film_hidden=64):
        self.input_dim = int(input_dim)
        self.action_dim = int(action_dim)
        self.context_dim = int(context_dim)
        self.trunk = Mlp([input_dim, hidden, hidden, 2 * action_dim], rng, head_scale=0.1)
        self.film = None
        if use_film and context_dim > 0:
            self.film = FilmGenerator(context_dim, self.trunk.hidden_widths, rng, film_hidden)

    def __repr__(self):
        return 'GaussianActor(in=%i, actions=%i, film=%s)' % (
            self.input_dim, self.action_dim, self.film is not None)

    def parameters(self):
        params = self.trunk.parameters()
        if self.film is not None:
            params += self.film.parameters()
        return params

    def named_parameters(self, prefix=''):
        named = self.trunk.named_parameters(prefix + 'trunk.')
        if self.film is not None:
            named += self.film.named_parameters(prefix + 'film.')
        return named

    def forward(self, x, context=None, film=None):
        """Returns (mean, log_std, cache)."""
        film_cache = None
        if film is None and self.film is not None and context is not None:
            film, film_cache = self.film.forward(context)
        out, trunk_cache = self.trunk.forward(x, film)
        mean = out[:, :self.action_dim]
        t = np.tanh(out[:, self.action_dim:])
        log_std = self.LOG_STD_MIN + 0.5 * (self.LOG_STD_MAX - self.LOG_STD_MIN) * (t + 1.)
        return mean, log_std, (trunk_cache, film_cache, t)

    def backward(self, cache, d_mean, d_log_std):
        trunk_cache, film_cache, t = cache
        d_raw = d_log_std * 0.5 * (self.LOG_STD_MAX - self.LOG_STD_MIN) * (1. - t ** 2)
        grads, _, film_grads = self.trunk.backward(trunk_cache,
                                                   np.concatenate([d_mean, d_raw], axis=1))
        if self.film is not None:
            if film_cache is not None:
                grads += self.film.backward(film_cache, film_grads)
            else:
                grads += [np.zeros_like(p) for p in self.film.parameters()]
        return grads

    def sample(self, x, context=None, rng=None, deterministic=False, noise=None):
        """Returns (y, log_prob, cache); y = tanh(mean + std * noise)."""
        mean, log_std, cache = self.forward(x, context)
        if noise is None:
            noise = np.zeros_like(mean) if deterministic else rng.standard_normal(mean.shape)
        std = np.exp(log_std)
        u = mean + std * noise
        y = np.tanh(u)
        squash = 1. - y ** 2
        log_prob = np.sum(-0.5 * noise ** 2 - log_std - 0.5 * LOG_2PI
                          - np.log(squash + 1e-6), axis=1)
        return y, log_prob, (cache, noise, std, y, squash)

    def sample_backward(self, sample_cache, d_y, d_log_prob):
        cache, noise, std, y, squash = sample_cache
        d_log_prob = np.asarray(d_log_prob)[:, None]
        du = d_y * squash + d_log_prob * 2. * y * squash / (squash + 1e-6)
        d_log_std = du * std * noise - d_log_prob
        return self.backward(cache, du, d_log_std)

    def check_objective(self, rng, batch=4, entropy_weight=0.3):
        x = rng.standard_normal((batch, self.input_dim))
        context = rng.standard_normal((batch, self.context_dim)) if self.context_dim else None
        noise = rng.standard_normal((batch, self.action_dim))
        v = rng.standard_normal((batch, self.action_dim))

        def objective(with_grads=True):
            y, log_prob, cache = self.sample(x, context, noise=noise)
            loss = float(np.sum(y * v) + entropy_weight * np.sum(log_prob))
            if not with_grads:
                return loss
            return loss, self.sample_backward(cache, v, np.full(batch, entropy_weight))
        return objective


def film_modulate(actor, context):
    """
    Returns forward(x) -> (mean, log_std) with the hidden layers of `actor`
    modulated by the FiLM parameters generated from `context`.
    """
    if actor.film is None:
        return lambda x: actor.forward(x)[:2]
    film, _ = actor.film.forward(context)

    def forward(x):
        x = np.atleast_2d(x)
        batch_film = [(np.broadcast_to(g, (len(x), g.shape[1])),
                       np.broadcast_to(b, (len(x), b.shape[1]))) for g, b in film]
        return actor.forward(x, film=batch_film)[:2]
    return forward


def gradient_check(net, h=1e-5, seed=0):
    """
    Largest relative error between backprop gradients and central finite
    differences over every parameter of `net`.
    """
    objective = net.check_objective(np.random.default_rng(seed))
    _, grads = objective()
    worst = 0.
    for p, g in zip(net.parameters(), grads):
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            plus = objective(False)
            p[idx] = orig - h
            minus = objective(False)
            p[idx] = orig
            numeric = (plus - minus) / (2. * h)
            err = abs(g[idx] - numeric) / max(abs(g[idx]) + abs(numeric), 1e-6)
            worst = max(worst, err)
    return worst


################################
#                              #
#  Replay Buffers              #
#                              #
################################

class ReplayBuffer:
    """FIFO ring of transitions stored as preallocated arrays."""

    def __init__(self, capacity):
        self.capacity = int(capacity)
        self._data = None
        self._size = 0
        self._head = 0

    def __len__(self):
        return self._size

    def __repr__(self):
        return 'ReplayBuffer(%i/%i)' % (self._size, self.capacity)

    def push(self, **transition):
        self.push_many({k: np.asarray(v)[None] for k, v in transition.items()})

    def push_many(self, batch):
        n = len(next(iter(batch.values())))
        if self._data is None:
            self._data = {k: np.zeros((self.capacity,) + np.shape(v)[1:])
                          for k, v in batch.items()}
        idx = (self._head + np.arange(n)) % self.capacity
        for k, v in batch.items():
            self._data[k][idx] = v
        self._head = (self._head + n) % self.capacity
        self._size = min(self._size + n, self.capacity)

    def get(self, indices):
        # slot i of the ring counts from the oldest kept transition
        slots = (self._head - self._size + np.asarray(indices)) % self.capacity
        return {k: v[slots] for k, v in self._data.items()}

    def oldest(self):
        return self.get([0]) if self._size else None

    def sample(self, n, rng):
        return self.get(rng.integers(0, self._size, size=n))


class DualReplayBuffer:
    """
    A replay buffer for recent transitions and a cross-epoch buffer for
    hindsight-relabeled ones, sampled with a fixed split. With dual=False
    everything lives in the replay buffer.
    """

    def __init__(self, replay_capacity=20000, cross_capacity=5000,
                 cross_fraction=0.3, dual=True):
        self.replay = ReplayBuffer(replay_capacity)
        self.cross = ReplayBuffer(cross_capacity)
        self.cross_fraction = cross_fraction
        self.dual = dual

    def __len__(self):
        return len(self.replay) + len(self.cross)

    def __repr__(self):
        return 'DualReplayBuffer(replay=%r, cross=%r)' % (self.replay, self.cross)

    def push(self, **transition):
        self.replay.push(**transition)

    def push_cross(self, batch):
        (self.cross if self.dual else self.replay).push_many(batch)

    def sample(self, batch_size, rng):
        n_cross = int(round(batch_size * self.cross_fraction)) if len(self.cross) else 0
        if not len(self.replay):
            n_cross = batch_size
        parts = []
        if batch_size - n_cross:
            parts.append(self.replay.sample(batch_size - n_cross, rng))
        if n_cross:
            parts.append(self.cross.sample(n_cross, rng))
        return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}


def goal_distance_reward(base_reward, achieved, goal, coeff=0.1):
    """Base reward minus coeff times the L2 distance to the goal."""
    achieved = np.atleast_2d(achieved)
    goal = np.broadcast_to(goal, achieved.shape)
    return np.asarray(base_reward) - coeff * np.linalg.norm(achieved - goal, axis=1)


def her_relabel(buffer, achieved_goal, k, rng, reward_fnc=goal_distance_reward):
    """
    Copies up to k replay transitions into the cross-epoch buffer with the
    goal replaced by the epoch's achieved metrics and the reward
    recomputed against it. Returns the number pushed.
    """
    n = min(int(k), len(buffer.replay))
    if n == 0:
        return 0
    batch = buffer.replay.get(rng.choice(len(buffer.replay), size=n, replace=False))
    batch['goal'] = np.broadcast_to(achieved_goal, batch['goal'].shape).copy()
    batch['reward'] = reward_fnc(batch['base_reward'], batch['achieved'], achieved_goal)
    buffer.push_cross(batch)
    return n


################################
#                              #
#  SacAgent Class              #
#                              #
################################

class SacAgent:
    """
    Soft actor-critic over scheduling plans. The actor sees state and goal
    and is FiLM-conditioned on a context vector; its squashed output is
    projected row-wise onto the simplex. Twin critics score
    (state, goal, plan).
    """

    def __init__(self, state_dim, context_dim, plan_shape, goal_dim=4, config=None, seed=0):
        self.config = config or SacConfig()
        cfg = self.config
        self.state_dim = int(state_dim)
        self.context_dim = int(context_dim)
        self.goal_dim = int(goal_dim)
        self.plan_shape = tuple(plan_shape)
        self.action_dim = int(np.prod(self.plan_shape))
        self.rng = np.random.default_rng(seed)

        in_dim = self.state_dim + self.goal_dim
        self.actor = GaussianActor(in_dim, self.action_dim, self.context_dim, self.rng,
                                   cfg.actor_hidden, cfg.use_film, cfg.film_hidden)
        self.critics = [Mlp([in_dim + self.action_dim, cfg.critic_hidden,
                             cfg.critic_hidden, 1], self.rng) for _ in range(2)]
        self.targets = [c.copy() for c in self.critics]
        self.actor_opt = Adam(self.actor.parameters(), cfg.actor_lr)
        self.critic_opts = [Adam(c.parameters(), cfg.critic_lr) for c in self.critics]
        self.log_alpha = np.array([np.log(cfg.initial_alpha)])
        self.alpha_opt = Adam([self.log_alpha], cfg.alpha_lr)
        self.imitation_opt = Adam(self.actor.parameters(), cfg.imitation_lr)
        self.target_entropy = -float(self.action_dim) if cfg.target_entropy is None \
            else cfg.target_entropy
        self.n_updates = 0

    def __repr__(self):
        return 'SacAgent(plan=%s, updates=%i)' % (self.plan_shape, self.n_updates)

    @property
    def alpha(self):
        if self.config.alpha is not None:
            return float(self.config.alpha)
        return float(np.exp(self.log_alpha[0]))

    def named_parameters(self):
        named = self.actor.named_parameters('actor.')
        for i, net in enumerate(self.critics):
            named += net.named_parameters('critic%i.' % i)
        for i, net in enumerate(self.targets):
            named += net.named_parameters('target%i.' % i)
        named.append(('log_alpha', self.log_alpha))
        return named

    def _policy_input(self, state, goal):
        state = np.atleast_2d(state)
        goal = np.broadcast_to(goal, (len(state), self.goal_dim))
        return np.concatenate([state, goal], axis=1)

    def _to_plan(self, y):
        return project_rows(y.reshape((-1,) + self.plan_shape))

    def act(self, state, goal, context=None, rng=None, deterministic=False):
        """Returns (plan routing (M, R, D), squashed action)."""
        x = self._policy_input(state, goal)
        context = None if context is None else np.atleast_2d(context)
        y, _, _ = self.actor.sample(x, context, rng or self.rng, deterministic)
        return self._to_plan(y)[0], y[0]

    def q_values(self, state, goal, plans):
        x = self._policy_input(state, goal)
        plans = np.asarray(plans).reshape(len(x), -1)
        inp = np.concatenate([x, plans], axis=1)
        return [c.forward(inp)[0][:, 0] for c in self.critics]

    def q_value(self, state, goal, plan):
        q1, q2 = self.q_values(state, goal, np.asarray(plan)[None])
        return float(min(q1[0], q2[0]))

    def q_gradient(self, state, goal, plan):
        """Gradient of min(Q1, Q2) with respect to the plan entries."""
        x = self._policy_input(state, goal)
        inp = np.concatenate([x, np.asarray(plan).reshape(1, -1)], axis=1)
        outs = [c.forward(inp) for c in self.critics]
        k = 0 if outs[0][0][0, 0] <= outs[1][0][0, 0] else 1
        _, dx, _ = self.critics[k].backward(outs[k][1], np.ones((1, 1)))
        return dx[0, x.shape[1]:].reshape(self.plan_shape)

    def imitate(self, state, goal, target, context=None, steps=20):
        """
        Pulls the deterministic action toward `target`, a routing of plan
        shape, by descending the squared error between the squashed mean and
        target - 1/D. That point projects onto the target exactly and lies
        inside the tanh range, so the error keeps a gradient at the
        simplex vertices. Returns the error before the last step.
        """
        x = self._policy_input(state, goal)
        context = None if context is None else np.atleast_2d(context)
        target = np.asarray(target, dtype=float).reshape(1, -1)
        y_target = target - 1. / self.plan_shape[-1]
        error = 0.
        for _ in range(steps):
            mean, log_std, cache = self.actor.forward(x, context)
            y = np.tanh(mean)
            diff = y - y_target
            error = float(np.sum(diff ** 2))
            if error < 1e-12:
                break
            d_mean = 2. * diff * (1. - y ** 2)
            self.imitation_opt.step(self.actor.backward(cache, d_mean, np.zeros_like(log_std)))
        return error

    def update(self, batch):
        return sac_update(self, batch)

    def soft_update(self, tau=None):
        tau = self.config.tau if tau is None else tau
        for target, online in zip(self.targets, self.critics):
            for t, p in zip(target.parameters(), online.parameters()):
                t[...] = (1. - tau) * t + tau * p


def _critic_grads_wrt_plan(critics, inp, n_plan, weights):
    q = []
    caches = []
    for c in critics:
        out, cache = c.forward(inp)
        q.append(out[:, 0])
        caches.append(cache)
    use_first = q[0] <= q[1]
    d_plan = np.zeros((len(inp), n_plan))
    for k, mask in enumerate((use_first, ~use_first)):
        _, dx, _ = critics[k].backward(caches[k], (mask * weights)[:, None])
        d_plan += dx[:, -n_plan:]
    return np.minimum(q[0], q[1]), d_plan


def sac_update(agent, batch):
    """
    One soft actor-critic step: both critics toward the entropy-regularized
    Bellman target of the target critics, one actor step, the temperature
    step when auto-tuned, and the soft target update.
    """
    cfg = agent.config
    state = np.asarray(batch['state'])
    if len(state) == 0:
        raise ValueError('empty batch')
    B = len(state)
    goal = np.asarray(batch['goal'])
    x = np.concatenate([state, goal], axis=1)
    x2 = np.concatenate([np.asarray(batch['next_state']), goal], axis=1)
    context = batch.get('context')
    next_context = batch.get('next_context')
    if agent.context_dim == 0:
        context = next_context = None
    reward = np.asarray(batch['reward'], dtype=float).reshape(B)
    done = np.asarray(batch.get('done', np.zeros(B)), dtype=float).reshape(B)
    plan = np.asarray(batch['plan']).reshape(B, -1)
    alpha = agent.alpha

    y2, log_prob2, _ = agent.actor.sample(x2, next_context, agent.rng)
    p2 = agent._to_plan(y2).reshape(B, -1)
    inp2 = np.concatenate([x2, p2], axis=1)
    q_next = np.minimum(*[t.forward(inp2)[0][:, 0] for t in agent.targets])
    target = reward + cfg.gamma * (1. - done) * (q_next - alpha * log_prob2)

    inp = np.concatenate([x, plan], axis=1)
    critic_loss = 0.
    for critic, opt in zip(agent.critics, agent.critic_opts):
        q, cache = critic.forward(inp)
        diff = q[:, 0] - target
        critic_loss += float(np.mean(diff ** 2))
        grads, _, _ = critic.backward(cache, (2. * diff / B)[:, None])
        opt.step(grads)
    if not np.isfinite(critic_loss):
        raise TrainingError('critic', critic_loss)

    y, log_prob, sample_cache = agent.actor.sample(x, context, agent.rng)
    p = agent._to_plan(y)
    q_min, d_plan = _critic_grads_wrt_plan(agent.critics,
                                           np.concatenate([x, p.reshape(B, -1)], axis=1),
                                           agent.action_dim, np.full(B, -1. / B))
    actor_loss = float(np.mean(alpha * log_prob - q_min))
    if not np.isfinite(actor_loss):
        raise TrainingError('actor', actor_loss)
    d_y = project_rows_backward(p, d_plan.reshape(p.shape)).reshape(B, -1)
    grads = agent.actor.sample_backward(sample_cache, d_y, np.full(B, alpha / B))
    agent.actor_opt.step(grads)

    alpha_loss = 0.
    if cfg.alpha is None:
        gap = log_prob + agent.target_entropy
        alpha_loss = float(-np.mean(agent.log_alpha[0] * gap))
        if not np.isfinite(alpha_loss):
            raise TrainingError('alpha', alpha_loss)
        agent.alpha_opt.step([np.array([-np.mean(gap)])])

    agent.soft_update()
    agent.n_updates += 1
    return {'critic_loss': critic_loss / 2., 'actor_loss': actor_loss,
            'alpha_loss': alpha_loss, 'alpha': agent.alpha,
            'entropy': float(-np.mean(log_prob))}


################################
#                              #
#  Checkpoints                 #
#                              #
################################

def save_checkpoint(agent, filename):
    filename = return_filename(filename)
    layers = [(name, tuple(p.shape), p.copy()) for name, p in agent.named_parameters()]
    with open(filename, 'wb') as f:
        pickle.dump({'format': CHECKPOINT_FORMAT, 'version': CHECKPOINT_VERSION,
                     'package_version': __version__, 'plan_shape': agent.plan_shape,
                     'layers': layers}, f)
    logger.info('checkpoint saved: %s (%i arrays)', filename, len(layers))


def load_checkpoint(agent, filename):
    """Restores parameters into an agent built with the same shapes."""
    filename = return_filename(filename)
    with open(filename, 'rb') as f:
        data = pickle.load(f)
    if data.get('format') != CHECKPOINT_FORMAT:
        raise ValueError('%s is not a %s checkpoint' % (filename, CHECKPOINT_FORMAT))
    if data.get('version') != CHECKPOINT_VERSION:
        raise ValueError('%s: unsupported checkpoint version %r' % (filename, data.get('version')))
    params = dict(agent.named_parameters())
    for name, shape, array in data['layers']:
        if name not in params or params[name].shape != tuple(shape):
            raise ValueError('%s: layer %s does not match the agent' % (filename, name))
        params[name][...] = array
    return agent
