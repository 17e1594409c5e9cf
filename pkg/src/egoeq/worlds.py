"""Deterministic synthetic data sources with ground-truth ego-poses.

``LatentLinearWorld``: a latent state ``s`` is observed as ``x = A s + noise``
and each atomic motion acts as ``s <- T_g s``, so exactly equivariant
features (``A^+ x``) and maps (``T_g``) exist. ``TextureWorld``: a camera
looking at a periodic value-noise texture, rendered through a similarity
transform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .motion import EgoPoseRecord


# --------------------------------------------------------------------------
# Latent-linear world
# --------------------------------------------------------------------------


def plane_rotation(k, i, j, angle):
    t = np.eye(k)
    c, s = math.cos(angle), math.sin(angle)
    t[i, i], t[i, j], t[j, i], t[j, j] = c, -s, s, c
    return t


@dataclass
class LatentLinearWorld:
    """Linear observation model with linear motions.

    ``motions`` maps each atomic motion name to ``(T_g, pose_step)`` where
    ``pose_step`` is what the motion adds to the recorded ego-pose.
    ``nuisance`` adds ``B u_t`` to every frame: a per-episode offset of
    scale ``nuisance_init`` plus either a random walk (``nuisance_walk``,
    a slow drift such as lighting) or independent per-frame flicker of
    scale ``nuisance_step``. It is independent of motion; zero by default.
    """

    A: np.ndarray
    motions: dict
    prototypes: np.ndarray
    noise_sigma: float = 0.01
    nuisance_basis: np.ndarray | None = None
    nuisance_step: float = 0.0
    nuisance_init: float = 0.0
    nuisance_walk: bool = True
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        if np.linalg.matrix_rank(self.A) < self.A.shape[1]:
            raise InputError("observation matrix A must have full column rank")
        for name, (t, _) in self.motions.items():
            if abs(np.linalg.det(t)) < 1e-12:
                raise InputError(f"motion {name!r} is not invertible")
        if self.noise_sigma < 0:
            raise InputError("noise_sigma must be non-negative")

    @property
    def latent_dim(self):
        return self.A.shape[1]

    @property
    def obs_dim(self):
        return self.A.shape[0]

    @property
    def pose_dim(self):
        return len(next(iter(self.motions.values()))[1])

    @property
    def atomic_motions(self):
        return list(self.motions)

    def transform(self, name):
        """Latent transform for ``name``; inverses (``down``/``left``/``name^-1``),
        ``hold`` and ``a+b`` composites (``a`` applied first) are derived."""
        if name == "hold":
            return np.eye(self.latent_dim)
        if "+" in name:
            t = np.eye(self.latent_dim)
            for part in name.split("+"):
                t = self.transform(part) @ t
            return t
        base, inverse = self._resolve(name)
        t = self.motions[base][0]
        return np.linalg.inv(t) if inverse else t.copy()

    def pose_step(self, name):
        if name == "hold":
            return np.zeros(self.pose_dim)
        if "+" in name:
            return sum((self.pose_step(p) for p in name.split("+")), np.zeros(self.pose_dim))
        base, inverse = self._resolve(name)
        step = np.asarray(self.motions[base][1], dtype=np.float64)
        return -step if inverse else step

    _INVERSES = {"down": "up", "left": "right"}

    def _resolve(self, name):
        if name in self.motions:
            return name, False
        base = self._INVERSES.get(name, name[:-3] if name.endswith("^-1") else None)
        if base in self.motions:
            return base, True
        raise InputError(f"unknown motion {name!r}")

    def observe(self, states, rng, nuisance=None):
        x = states @ self.A.T
        if nuisance is not None:
            x = x + nuisance @ self.nuisance_basis.T
        if self.noise_sigma > 0:
            x = x + rng.normal(0.0, self.noise_sigma, size=x.shape)
        return x

    def oracle_features(self, x):
        """Least-squares latent estimate ``A^+ x``."""
        return np.asarray(x, dtype=np.float64) @ np.linalg.pinv(self.A).T

    def sample_pairs(self, motion, n, seed, states=None):
        """``n`` pairs ``(x, g x)`` from random latent states (or given ``states``).

        Returns ``(x, gx, s)``.
        """
        rng = np.random.default_rng(seed)
        if states is None:
            cls = rng.integers(len(self.prototypes), size=n)
            states = self.prototypes[cls] + rng.normal(0.0, 0.5, size=(n, self.latent_dim))
        t = self.transform(motion)
        nuis_a = nuis_b = None
        if self.nuisance_basis is not None:
            m = self.nuisance_basis.shape[1]
            offset = rng.normal(0.0, self.nuisance_init, size=(n, m))
            nuis_a = offset + (0.0 if self.nuisance_walk else rng.normal(0.0, self.nuisance_step, size=(n, m)))
            nuis_b = (nuis_a if self.nuisance_walk else offset) + rng.normal(0.0, self.nuisance_step, size=(n, m))
        return self.observe(states, rng, nuis_a), self.observe(states @ t.T, rng, nuis_b), states

    @classmethod
    def create(cls, seed, latent_dim=4, obs_dim=64, num_classes=5, noise_sigma=0.01,
               up_deg=10.0, right_deg=15.0, prototype_scale=1.0,
               nuisance_dim=0, nuisance_gain=0.0, nuisance_step=0.0, nuisance_init=0.0, nuisance_walk=True):
        """Default world: two commuting plane rotations named ``up`` and ``right``.

        ``up`` rotates latent plane (0, 1) by ``up_deg`` and records +up_deg
        elevation; ``right`` rotates plane (2, 3) by ``right_deg`` and records
        +right_deg azimuth. Needs ``latent_dim >= 4``.
        """
        if latent_dim < 4:
            raise InputError("latent_dim must be at least 4")
        if obs_dim < latent_dim:
            raise InputError("obs_dim must be at least latent_dim")
        rng = np.random.default_rng(seed)
        A = rng.normal(0.0, 1.0, size=(obs_dim, latent_dim)) / math.sqrt(latent_dim)
        motions = {
            "up": (plane_rotation(latent_dim, 0, 1, math.radians(up_deg)), (up_deg, 0.0)),
            "right": (plane_rotation(latent_dim, 2, 3, math.radians(right_deg)), (0.0, right_deg)),
        }
        prototypes = rng.normal(0.0, prototype_scale, size=(num_classes, latent_dim))
        basis = None
        if nuisance_dim > 0:
            basis = rng.normal(0.0, nuisance_gain, size=(obs_dim, nuisance_dim)) / math.sqrt(nuisance_dim)
        config = {
            "kind": "linear", "seed": seed, "latent_dim": latent_dim, "obs_dim": obs_dim,
            "num_classes": num_classes, "noise_sigma": noise_sigma, "up_deg": up_deg,
            "right_deg": right_deg, "prototype_scale": prototype_scale, "nuisance_dim": nuisance_dim,
            "nuisance_gain": nuisance_gain, "nuisance_step": nuisance_step, "nuisance_init": nuisance_init,
            "nuisance_walk": nuisance_walk,
        }
        return cls(A, motions, prototypes, noise_sigma, basis, nuisance_step, nuisance_init,
                   nuisance_walk, config)


def sample_view_sets(world: LatentLinearWorld, n, views, seed, start_jitter_deg=0.0, labels=None,
                     span_deg=(0.0, 0.0)):
    """``n`` starting states with the observation reached by each motion in ``views``.

    Classes cycle through ``0..C-1`` unless ``labels`` is given; each start is
    the class prototype rotated in the two motion planes by uniform angles in
    ``[-start_jitter_deg, start_jitter_deg + span_deg[p]]``. Returns
    ``(frames, labels)`` with ``frames`` of shape ``(n, 1 + len(views),
    obs_dim)``; column 0 is the starting view.
    """
    rng = np.random.default_rng(seed)
    C = len(world.prototypes)
    labels = np.arange(n) % C if labels is None else np.asarray(labels, dtype=np.int64)
    k = world.latent_dim
    states = np.empty((n, k))
    for i in range(n):
        a, b = np.radians(rng.uniform(-start_jitter_deg, start_jitter_deg + np.asarray(span_deg, dtype=np.float64)))
        states[i] = plane_rotation(k, 0, 1, a) @ plane_rotation(k, 2, 3, b) @ world.prototypes[labels[i]]
    nuis = None
    if world.nuisance_basis is not None:
        m = world.nuisance_basis.shape[1]
        nuis = rng.normal(0.0, world.nuisance_init, size=(n, m))
    cols = [world.observe(states, rng, _view_nuisance(world, nuis, rng))]
    for name in views:
        cols.append(world.observe(states @ world.transform(name).T, rng, _view_nuisance(world, nuis, rng)))
    return np.stack(cols, axis=1), labels


def _view_nuisance(world, offset, rng):
    # each view is one nuisance step (walk) or one flicker draw away from the shared offset
    if offset is None or world.nuisance_step <= 0:
        return offset
    return offset + rng.normal(0.0, world.nuisance_step, size=offset.shape)


def texture_view_sets(world: "TextureWorld", n, views, seed, forward_range=(0.0, 6.0), labels=None):
    """Texture-world analogue of :func:`sample_view_sets`.

    Each start has a uniform random position, heading and forward offset in
    ``forward_range``; a view ``a+b`` applies the pose steps of ``a`` then
    ``b``. Returns ``(frames, labels)`` with frames of shape
    ``(n, 1 + len(views), 1, h, w)``.
    """
    rng = np.random.default_rng(seed)
    C = len(world.textures)
    labels = np.arange(n) % C if labels is None else np.asarray(labels, dtype=np.int64)
    steps = []
    for name in views:
        parts = [world.step(p) for p in name.split("+")]
        steps.append((sum(p[0] for p in parts), sum(p[1] for p in parts)))
    frames = np.empty((n, 1 + len(views)) + world.frame_shape)
    for i in range(n):
        size = world.textures[labels[i]].shape[0]
        tx, ty = rng.uniform(0, size, size=2)
        yaw = rng.uniform(0.0, 360.0)
        forward = rng.uniform(*forward_range)
        frames[i, 0, 0] = world.render(world.camera(yaw, forward, tx, ty), labels[i])
        for v, (dyaw, dfwd) in enumerate(steps, 1):
            frames[i, v, 0] = world.render(world.camera(yaw + dyaw, forward + dfwd, tx, ty), labels[i])
    return frames, labels


@dataclass
class Episode:
    frames: np.ndarray
    records: list
    latents: np.ndarray
    label: int = -1


def gen_latent_episode(world: LatentLinearWorld, length, script, seed, start_state=None,
                       label=-1, start_time=0.0, dt=0.1, first_frame_id=0):
    """Roll the latent state through ``script`` (one motion name per step).

    ``length`` frames are produced, so ``script`` needs ``length - 1``
    entries. Poses record cumulative motion parameters.
    """
    script = list(script)
    if length < 1 or len(script) < length - 1:
        raise InputError(f"script has {len(script)} steps, need {length - 1}")
    rng = np.random.default_rng(seed)
    if start_state is None:
        base = world.prototypes[label] if label >= 0 else np.zeros(world.latent_dim)
        start_state = base + rng.normal(0.0, 0.5 if label < 0 else 0.0, size=world.latent_dim)
    states = np.empty((length, world.latent_dim))
    poses = np.empty((length, world.pose_dim))
    states[0] = start_state
    poses[0] = 0.0
    for t in range(1, length):
        name = script[t - 1]
        states[t] = world.transform(name) @ states[t - 1]
        poses[t] = poses[t - 1] + world.pose_step(name)
    nuisance = None
    if world.nuisance_basis is not None:
        m = world.nuisance_basis.shape[1]
        steps = rng.normal(0.0, world.nuisance_step, size=(length, m))
        offset = rng.normal(0.0, world.nuisance_init, size=m)
        nuisance = offset + (np.cumsum(steps, axis=0) if world.nuisance_walk else steps)
    frames = world.observe(states, rng, nuisance)
    records = [
        EgoPoseRecord(first_frame_id + t, start_time + t * dt, tuple(poses[t].tolist())) for t in range(length)
    ]
    return Episode(frames, records, states, label)


def raster_script(rows, cols, row_motion="up", col_motion="right", back_motion="left"):
    """Boustrophedon scan of a ``rows x cols`` pose grid (``rows * cols - 1`` steps)."""
    script = []
    for r in range(rows):
        script += [col_motion if r % 2 == 0 else back_motion] * (cols - 1)
        if r < rows - 1:
            script.append(row_motion)
    return script


def random_script(length, motions, seed, probs=None):
    rng = np.random.default_rng(seed)
    return [motions[i] for i in rng.choice(len(motions), size=length, p=probs)]


def drive_script(length, seed, probs=None, reversals=False):
    """Vehicle-like script over ``left``/``right``/``zoom``.

    ``probs`` weights the three motions (default 1/4, 1/4, 1/2). Unless
    ``reversals`` is set, a turn never immediately undoes the previous turn.
    """
    names = ["left", "right", "zoom"]
    p = np.array([0.25, 0.25, 0.5] if probs is None else [probs[n] for n in names], dtype=np.float64)
    p = p / p.sum()
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(length):
        q = p.copy()
        if not reversals and out and out[-1] in ("left", "right"):
            q[names.index("right" if out[-1] == "left" else "left")] = 0.0
            q /= q.sum()
        out.append(names[int(rng.choice(3, p=q))])
    return out


# --------------------------------------------------------------------------
# Texture world
# --------------------------------------------------------------------------


def value_noise(size, seed, octaves=4, base_cells=4):
    """Periodic multi-octave value noise on a ``size x size`` grid, scaled to [0, 1]."""
    rng = np.random.default_rng(seed)
    out = np.zeros((size, size))
    amp = 1.0
    for o in range(octaves):
        cells = base_cells * 2 ** o
        grid = rng.uniform(0.0, 1.0, size=(cells, cells))
        coords = np.arange(size) * cells / size
        i0 = np.floor(coords).astype(int)
        f = coords - i0
        f = f * f * (3.0 - 2.0 * f)
        i1 = (i0 + 1) % cells
        rows0 = grid[i0] * (1 - f)[:, None] + grid[i1] * f[:, None]
        layer = rows0[:, i0] * (1 - f)[None, :] + rows0[:, i1] * f[None, :]
        out += amp * layer
        amp *= 0.5
    out -= out.min()
    peak = out.max()
    return out / peak if peak > 0 else out


@dataclass
class CameraPose:
    tx: float = 0.0
    ty: float = 0.0
    theta: float = 0.0
    zoom: float = 1.0

    def __post_init__(self):
        if not self.zoom > 0:
            raise InputError("zoom must be positive")


@dataclass
class TextureWorld:
    """Camera window over one periodic texture per class.

    Atomic motions: ``left``/``right`` turn the camera by ``turn_deg`` and
    ``zoom`` moves forward by ``forward_step`` (zoom factor
    ``exp(zoom_rate * forward)``). Poses are recorded as ``(yaw_deg,
    forward)``.
    """

    textures: list
    window: tuple = (24, 24)
    turn_deg: float = 10.0
    forward_step: float = 1.0
    zoom_rate: float = 0.08
    pose_noise: float = 0.0
    config: dict = field(default_factory=dict)

    @classmethod
    def create(cls, seed, num_classes=4, texture_size=64, window=(24, 24), octaves=4,
               turn_deg=10.0, forward_step=1.0, zoom_rate=0.08, pose_noise=0.0):
        seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=num_classes)
        textures = [value_noise(texture_size, int(s), octaves) for s in seeds]
        config = {
            "kind": "texture", "seed": seed, "num_classes": num_classes, "texture_size": texture_size,
            "window": list(window), "octaves": octaves, "turn_deg": turn_deg, "forward_step": forward_step,
            "zoom_rate": zoom_rate, "pose_noise": pose_noise,
        }
        return cls(textures, tuple(window), turn_deg, forward_step, zoom_rate, pose_noise, config)

    @property
    def frame_shape(self):
        return (1,) + tuple(self.window)

    def render(self, pose: CameraPose, cls=0):
        return render(self.textures[cls], pose, self.window)

    def camera(self, yaw_deg, forward, tx, ty):
        return CameraPose(tx, ty, math.radians(yaw_deg), math.exp(self.zoom_rate * forward))

    def step(self, name):
        """Ego-pose increment ``(dyaw_deg, dforward)`` of a motion."""
        steps = {
            "left": (-self.turn_deg, 0.0),
            "right": (self.turn_deg, 0.0),
            "zoom": (0.0, self.forward_step),
            "hold": (0.0, 0.0),
        }
        if name not in steps:
            raise InputError(f"unknown motion {name!r}")
        return steps[name]


def render(texture, pose: CameraPose, window):
    """Bilinear sample of a periodic ``texture`` through the camera similarity transform.

    Output pixel ``(r, c)`` reads texture position
    ``(ty, tx) + R(theta) (v, u) / zoom + centre`` with ``(u, v)`` the offset
    from the window centre; at ``zoom=1, theta=0`` and integer ``(tx, ty)``
    this is exactly ``texture[r + ty, c + tx]`` (indices modulo size).
    """
    h, w = window
    size_y, size_x = texture.shape
    v, u = np.meshgrid(np.arange(h) - (h - 1) / 2.0, np.arange(w) - (w - 1) / 2.0, indexing="ij")
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    # exact multiples of 2*pi must leave the grid untouched
    if abs(s) < 1e-12:
        s = 0.0
    if abs(c - round(c)) < 1e-12:
        c = float(round(c))
    X = pose.tx + (c * u - s * v) / pose.zoom + (w - 1) / 2.0
    Y = pose.ty + (s * u + c * v) / pose.zoom + (h - 1) / 2.0
    x0 = np.floor(X)
    y0 = np.floor(Y)
    fx = X - x0
    fy = Y - y0
    x0 = x0.astype(np.int64) % size_x
    y0 = y0.astype(np.int64) % size_y
    x1 = (x0 + 1) % size_x
    y1 = (y0 + 1) % size_y
    top = texture[y0, x0] * (1 - fx) + texture[y0, x1] * fx
    bottom = texture[y1, x0] * (1 - fx) + texture[y1, x1] * fx
    return np.clip(top * (1 - fy) + bottom * fy, 0.0, 1.0)


def gen_texture_episode(world: TextureWorld, length, script, seed, label=0, start_time=0.0,
                        dt=0.25, first_frame_id=0):
    """Render ``length`` frames of class ``label`` while following ``script``."""
    script = list(script)
    if len(script) < length - 1:
        raise InputError(f"script has {len(script)} steps, need {length - 1}")
    rng = np.random.default_rng(seed)
    size = world.textures[label].shape[0]
    tx, ty = rng.uniform(0, size, size=2)
    yaw = rng.uniform(0.0, 360.0)
    forward = 0.0
    frames = np.empty((length,) + world.frame_shape)
    records = []
    for t in range(length):
        if t > 0:
            dyaw, dfwd = world.step(script[t - 1])
            yaw += dyaw
            forward += dfwd
        frames[t, 0] = world.render(world.camera(yaw, forward, tx, ty), label)
        sensed = np.array([yaw, forward]) + rng.normal(0.0, world.pose_noise, size=2) if world.pose_noise else (yaw, forward)
        records.append(EgoPoseRecord(first_frame_id + t, start_time + t * dt, tuple(float(v) for v in sensed)))
    return Episode(frames, records, np.zeros((length, 0)), label)
