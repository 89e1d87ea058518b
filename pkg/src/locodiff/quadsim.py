"""QuadOsc: a deterministic desk-scale quadruped stand-in.

Each leg is one PD-servoed oscillator. Locomotion emerges from a signed
thrust per leg, tau_i = q_i * qdot_i^2, whose cycle mean is proportional to
the leg's slow "lean" offset times its oscillation energy. Thrust is gated
by gait coherence: the amplitude-weighted phasor agreement between actual
leg phases and the commanded gait's reference offsets. Incoherent motion at
speed pumps a roll/pitch wobble oscillator tuned near the leg frequency
band; exceeding the tilt threshold is a fall.

Leg order everywhere: (FL, FR, RL, RR).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

GAITS = ("trot", "bound", "pace", "pronk")
GAIT_OFFSETS = {
    "trot": np.array([0.0, math.pi, math.pi, 0.0]),
    "bound": np.array([0.0, 0.0, math.pi, math.pi]),
    "pace": np.array([0.0, math.pi, 0.0, math.pi]),
    "pronk": np.array([0.0, 0.0, 0.0, 0.0]),
}
SIDE = np.array([1.0, -1.0, 1.0, -1.0])   # +left
DIAG = np.array([1.0, -1.0, -1.0, 1.0])   # +FL/RR diagonal

# command sampling box
VX_RANGE = (-1.0, 1.0)
VY_RANGE = (-0.6, 0.6)
WZ_RANGE = (-0.5, 0.5)

OBS_DIM = 18
ACTION_DIM = 4
GOAL_DIM = 7


class EnvAbort(RuntimeError):
    """Raised when the plant state goes non-finite; never silently continued."""


@dataclass(frozen=True)
class Goal:
    vx: float
    vy: float
    wz: float
    gait: np.ndarray  # 4 slots; one-hot for structured goals

    @staticmethod
    def structured(vx, vy, wz, gait):
        idx = GAITS.index(gait) if isinstance(gait, str) else int(gait)
        onehot = np.zeros(4, dtype=np.float32)
        onehot[idx] = 1.0
        return Goal(float(vx), float(vy), float(wz), onehot)

    @property
    def gait_index(self):
        return int(np.argmax(self.gait))

    @property
    def gait_name(self):
        return GAITS[self.gait_index]

    def vector(self):
        return np.concatenate([
            np.array([self.vx, self.vy, self.wz], dtype=np.float32),
            np.asarray(self.gait, dtype=np.float32),
        ])


@dataclass(frozen=True)
class EnvConfig:
    dt: float = 0.02
    substeps: int = 4
    Kp: float = 400.0          # joint PD stiffness
    Kd: float = 20.0           # joint PD damping
    T_v: float = 0.3           # body-velocity lag (s)
    k_x: float = 0.045         # forward drive gain
    k_y: float = 0.13          # lateral drive gain
    k_w: float = 0.20          # yaw drive gain
    k_s: float = 250.0         # wobble stiffness (resonant near top leg rate)
    d_s: float = 6.0           # wobble damping
    xi: float = 2.0            # incoherence-to-wobble coupling
    sigma_w: float = 0.3       # wobble process-noise intensity
    center_tau: float = 0.25   # EMA time constant for leg oscillation centers
    thrust_tau: float = 0.2    # EMA smoothing of thrust feeding the drives
    fall_rad: float = 0.6      # |roll| or |pitch| beyond this is a fall
    q_clamp: float = 2.0
    horizon: int = 500
    # per-episode randomization ranges
    rand_pd: float = 0.2       # Kp, Kd scaled by U(1-r, 1+r)
    rand_drive: tuple = (0.8, 1.2)
    rand_noise: tuple = (0.5, 2.0)


@dataclass(frozen=True)
class PlantParams:
    """Per-episode randomized plant coefficients."""
    Kp: float
    Kd: float
    drive_scale: float
    noise_scale: float

    @staticmethod
    def nominal(cfg):
        return PlantParams(cfg.Kp, cfg.Kd, 1.0, 1.0)

    @staticmethod
    def sample(cfg, rng):
        return PlantParams(
            Kp=cfg.Kp * rng.uniform(1.0 - cfg.rand_pd, 1.0 + cfg.rand_pd),
            Kd=cfg.Kd * rng.uniform(1.0 - cfg.rand_pd, 1.0 + cfg.rand_pd),
            drive_scale=rng.uniform(*cfg.rand_drive),
            noise_scale=rng.uniform(*cfg.rand_noise),
        )


@dataclass
class EnvState:
    vx: float = 0.0
    vy: float = 0.0
    wz: float = 0.0
    roll: float = 0.0
    pitch: float = 0.0
    roll_rate: float = 0.0
    pitch_rate: float = 0.0
    q: np.ndarray = field(default_factory=lambda: np.zeros(4))
    qd: np.ndarray = field(default_factory=lambda: np.zeros(4))
    q_center: np.ndarray = field(default_factory=lambda: np.zeros(4))
    tau_f: np.ndarray = field(default_factory=lambda: np.zeros(4))
    a_prev: np.ndarray = field(default_factory=lambda: np.zeros(4))
    t: int = 0
    fallen: bool = False


def leg_phase(q, qd, omega_n):
    """Oscillator phase and amplitude of each leg: psi = atan2(-qd/wn, q)."""
    scaled = -np.asarray(qd) / omega_n
    psi = np.arctan2(scaled, q)
    amp = np.hypot(q, scaled)
    return psi, amp


def gait_coherence(psi, amp, gait):
    """Amplitude-weighted phasor agreement with the gait's reference offsets,
    in [0, 1]."""
    off = GAIT_OFFSETS[gait]
    z = np.sum(amp * np.exp(1j * (psi - off)))
    return float(np.abs(z) / (np.sum(amp) + 1e-6))


def observe(state):
    """18-dim observation: tilt rates, yaw rate, gravity vector, q, qd, a_prev."""
    r, p = state.roll, state.pitch
    grav = (-math.sin(p), math.sin(r) * math.cos(p), -math.cos(r) * math.cos(p))
    return np.concatenate([
        [state.roll_rate, state.pitch_rate, state.wz],
        grav,
        state.q,
        state.qd,
        state.a_prev,
    ]).astype(np.float32)


def env_step(state, action, goal, cfg, rng, plant=None):
    """Advance one 50 Hz control step.

    Returns (state', obs, reward, fell, done). Raises EnvAbort on non-finite
    state. The caller is responsible for clamping the action to [-1, 1].
    """
    if plant is None:
        plant = PlantParams.nominal(cfg)
    a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    h = cfg.dt / cfg.substeps
    omega_n = math.sqrt(cfg.Kp)
    gait = goal.gait_name

    q = state.q.copy()
    qd = state.qd.copy()
    qc = state.q_center.copy()
    tf = state.tau_f.copy()
    vx, vy, wz = state.vx, state.vy, state.wz
    roll, pitch = state.roll, state.pitch
    rr, pr = state.roll_rate, state.pitch_rate
    noise_int = cfg.sigma_w * plant.noise_scale / math.sqrt(h)

    fell = state.fallen
    for _ in range(cfg.substeps):
        # joint PD servo, semi-implicit Euler
        qdd = plant.Kp * (a - q) - plant.Kd * qd
        qd = qd + h * qdd
        q = q + h * qd
        over = np.abs(q) > cfg.q_clamp
        if over.any():
            q = np.clip(q, -cfg.q_clamp, cfg.q_clamp)
            qd = np.where(over, 0.0, qd)
        qc = qc + (h / cfg.center_tau) * (q - qc)

        # gait coherence of the centered oscillation
        psi, amp = leg_phase(q - qc, qd, omega_n)
        C = gait_coherence(psi, amp, gait)

        # signed thrust: cycle mean ~ lean * oscillation energy
        tau = q * qd * qd
        u_r = (tau[0] + tau[2]) - (tau[1] + tau[3])
        u_p = (tau[0] + tau[1]) - (tau[2] + tau[3])

        # drives run off a smoothed thrust (body inertia); wobble sees raw tau
        tf = tf + (h / cfg.thrust_tau) * (tau - tf)
        Dx = cfg.k_x * plant.drive_scale * C * float(np.mean(tf))
        Dy = cfg.k_y * plant.drive_scale * C * ((tf[0] + tf[2]) - (tf[1] + tf[3])) / 4.0
        Dw = cfg.k_w * plant.drive_scale * C * (
            (tf[0] + tf[3]) - (tf[1] + tf[2])) / 4.0
        vx += h * (Dx - vx) / cfg.T_v
        vy += h * (Dy - vy) / cfg.T_v
        wz += h * (Dw - wz) / cfg.T_v

        # wobble: incoherence at speed pumps roll/pitch
        pump = cfg.xi * (1.0 - C) * (abs(vx) + abs(vy) + 0.2)
        racc = -cfg.k_s * roll - cfg.d_s * rr + pump * u_r + noise_int * rng.standard_normal()
        pacc = -cfg.k_s * pitch - cfg.d_s * pr + pump * u_p + noise_int * rng.standard_normal()
        rr += h * racc
        pr += h * pacc
        roll += h * rr
        pitch += h * pr

        if abs(roll) > cfg.fall_rad or abs(pitch) > cfg.fall_rad:
            fell = True

    new = EnvState(vx=vx, vy=vy, wz=wz, roll=roll, pitch=pitch,
                   roll_rate=rr, pitch_rate=pr, q=q, qd=qd, q_center=qc,
                   tau_f=tf, a_prev=a.copy(), t=state.t + 1, fallen=fell)
    for val in (vx, vy, wz, roll, pitch, rr, pr):
        if not math.isfinite(val):
            raise EnvAbort(f"non-finite body state at step {new.t}")
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(qd))):
        raise EnvAbort(f"non-finite joint state at step {new.t}")

    obs = observe(new)
    track = ((vx - goal.vx) ** 2 + (vy - goal.vy) ** 2 + 0.5 * (wz - goal.wz) ** 2)
    fell_now = fell and not state.fallen
    reward = -track - (10.0 if fell_now else 0.0)
    done = fell or new.t >= cfg.horizon
    return new, obs, reward, fell, done


class QuadEnv:
    """Stateful convenience wrapper: owns config, per-episode plant, RNG."""

    def __init__(self, cfg=None, seed=0, env_index=0):
        self.cfg = cfg or EnvConfig()
        self.rng = np.random.Generator(np.random.Philox(key=np.uint64(seed) << np.uint64(20) | np.uint64(env_index)))
        self.state = EnvState()
        self.goal = Goal.structured(0.0, 0.0, 0.0, "trot")
        self.plant = PlantParams.nominal(self.cfg)

    def reset(self, goal, randomize=True):
        self.goal = goal
        self.plant = PlantParams.sample(self.cfg, self.rng) if randomize \
            else PlantParams.nominal(self.cfg)
        self.state = EnvState()
        return observe(self.state)

    def set_goal(self, goal):
        self.goal = goal

    def step(self, action):
        self.state, obs, reward, fell, done = env_step(
            self.state, action, self.goal, self.cfg, self.rng, self.plant)
        return obs, reward, fell, done


def sample_goal(rng, gait=None):
    """Uniform command in the box; gait uniform unless pinned."""
    if gait is None:
        gait = GAITS[rng.integers(len(GAITS))]
    return Goal.structured(
        rng.uniform(*VX_RANGE), rng.uniform(*VY_RANGE), rng.uniform(*WZ_RANGE), gait)


# ---------------------------------------------------------------------------
# scripted experts
# ---------------------------------------------------------------------------

LEAN_MAX = 0.3
LEAN_SOFT = 0.15     # tanh scale used during amplitude calibration
AMP_FLOOR = 0.1
CAL_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)


@dataclass
class ExpertTable:
    """Calibrated per-gait amplitude curve plus thrust coefficients.

    Steady-state drive is modelled as kappa * lean * (A f)^2 per axis; the
    kappas are extracted from the calibration rollouts so the expert can
    invert the model for feedforward lean offsets at any operating point.
    """
    amp: dict          # gait -> np.ndarray over CAL_GRID
    kappa_x: dict      # forward:  vx ~ kappa_x * lean * (A f)^2
    kappa_y: dict      # lateral:  vy ~ kappa_y * delta_y * (A f)^2
    kappa_w: dict      # yaw:      wz ~ kappa_w * delta_w * (A f)^2
    saturated: dict    # gait -> list of saturated grid speeds

    def amplitude(self, gait, speed):
        return float(np.interp(abs(speed), CAL_GRID, self.amp[gait]))


def _lean(vx_cmd):
    return LEAN_MAX * math.tanh(vx_cmd / LEAN_SOFT)


def command_speed(goal):
    """Scalar gait intensity for a command (yaw counts at half weight)."""
    return math.hypot(goal.vx, goal.vy) + 0.5 * abs(goal.wz)


def expert_action(theta, goal, amplitude, freq_hz, table, offsets=None):
    """Feedforward PD targets for one control step at gait phase theta."""
    gait = goal.gait_name
    off = GAIT_OFFSETS[gait] if offsets is None else offsets
    energy = max((amplitude * freq_hz) ** 2, 1e-6)
    lean_x = np.clip(goal.vx / (table.kappa_x[gait] * energy), -LEAN_MAX, LEAN_MAX)
    d_y = np.clip(goal.vy / (table.kappa_y[gait] * energy), -0.25, 0.25)
    d_w = np.clip(goal.wz / (table.kappa_w[gait] * energy), -0.25, 0.25)
    lean = lean_x + d_y * SIDE + d_w * DIAG
    return np.clip(lean + amplitude * np.cos(2.0 * math.pi * theta + off), -1.0, 1.0)


def expert_freq(goal):
    return 1.5 + 1.0 * command_speed(goal)


class ScriptedExpert:
    """Open-loop gait generator driven by a calibrated amplitude table.

    Switching the goal's gait re-targets all phase offsets at once while
    theta stays continuous; `notify_switch(old_goal)` additionally jumps
    theta by the global phase that minimizes the worst per-leg phase travel
    to the new pattern, shortening the low-coherence window during which the
    wobble mode is pumped.  This doubles as the transition-ceiling
    controller."""

    def __init__(self, table, cfg=None):
        if table is None:
            raise ValueError("expert requires a calibrated amplitude table")
        self.table = table
        self.cfg = cfg or EnvConfig()
        self.theta = 0.0

    def reset(self, theta=0.0):
        self.theta = theta

    def notify_switch(self, old_goal=None, new_goal=None):
        if old_goal is None or new_goal is None:
            return
        delta = (GAIT_OFFSETS[new_goal.gait_name]
                 - GAIT_OFFSETS[old_goal.gait_name])
        grid = np.linspace(0.0, 2.0 * math.pi, 256, endpoint=False)
        worst = np.max(1.0 - np.cos(delta[None, :] - grid[:, None]), axis=1)
        self.theta -= grid[int(np.argmin(worst))] / (2.0 * math.pi)

    def action(self, goal):
        s = command_speed(goal)
        amp = self.table.amplitude(goal.gait_name, s)
        f = expert_freq(goal)
        a = expert_action(self.theta, goal, amp, f, self.table)
        self.theta += f * self.cfg.dt
        return a


def _mean_speed_rollout(cfg, gait, amplitude, vx_cmd, seconds=10.0,
                        delta_y=0.0, delta_w=0.0):
    """Noise-free fixed-amplitude rollout; returns steady-state (vx, vy, wz)."""
    quiet = replace(cfg, sigma_w=0.0)
    rng = np.random.default_rng(0)
    state = EnvState()
    goal = Goal.structured(vx_cmd, 0.0, 0.0, gait)
    off = GAIT_OFFSETS[gait]
    theta = 0.0
    f = 1.5 + abs(vx_cmd)
    steps = int(seconds / cfg.dt)
    rec = []
    for i in range(steps):
        lean = _lean(vx_cmd) + delta_y * SIDE + delta_w * DIAG
        a = np.clip(lean + amplitude * np.cos(2.0 * math.pi * theta + off), -1.0, 1.0)
        theta += f * cfg.dt
        state, _, _, _, _ = env_step(state, a, goal, quiet, rng)
        if i >= steps // 2:
            rec.append((state.vx, state.vy, state.wz))
    rec = np.array(rec)
    return rec.mean(axis=0)


def calibrate_expert(cfg, gait, v_target, tol=0.02, max_iter=30):
    """Bisection on oscillation amplitude against steady-state forward speed.

    Returns (amplitude, saturated). v_target == 0 uses the amplitude floor.
    """
    if abs(v_target) < 1e-9:
        return AMP_FLOOR, False
    lo, hi = 0.02, 0.95
    v_hi = _mean_speed_rollout(cfg, gait, hi, v_target)[0]
    if abs(v_hi) < abs(v_target) - tol:
        return hi, True
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        v = _mean_speed_rollout(cfg, gait, mid, v_target)[0]
        if abs(abs(v) - abs(v_target)) <= tol:
            return mid, False
        if abs(v) < abs(v_target):
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi), False


def build_expert_table(cfg=None, probe=0.08):
    """Calibrate all gaits over the speed grid and fit thrust coefficients."""
    cfg = cfg or EnvConfig()
    amp, kx, ky, kw, saturated = {}, {}, {}, {}, {}
    for gait in GAITS:
        curve, sat = [], []
        for v in CAL_GRID:
            a, s = calibrate_expert(cfg, gait, v)
            curve.append(a)
            if s:
                sat.append(v)
        curve = np.maximum.accumulate(np.array(curve))  # enforce monotone
        amp[gait] = curve
        saturated[gait] = sat
        # forward coefficient from the calibrated nodes (skip v=0)
        ks = []
        for v, a in zip(CAL_GRID[1:], curve[1:]):
            f = 1.5 + v
            ks.append(v / (_lean(v) * (a * f) ** 2))
        kx[gait] = float(np.mean(ks))
        # lateral/yaw coefficients from probe rollouts at mid speed
        a_mid = float(np.interp(0.5, CAL_GRID, curve))
        f_mid = 2.0
        energy = (a_mid * f_mid) ** 2
        _, vy, _ = _mean_speed_rollout(cfg, gait, a_mid, 0.5, delta_y=probe)
        _, _, wzm = _mean_speed_rollout(cfg, gait, a_mid, 0.5, delta_w=probe)
        ky[gait] = max(vy / (probe * energy), 1e-6)
        kw[gait] = max(wzm / (probe * energy), 1e-6)
    return ExpertTable(amp=amp, kappa_x=kx, kappa_y=ky, kappa_w=kw,
                       saturated=saturated)
