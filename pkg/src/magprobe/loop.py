"""Wiring of the full closed loop: world physics -> sensor simulation ->
EKF localization -> PD control -> actuator setpoint, advanced one sensor tick
at a time. Scenario runners and the teleoperation service both drive this.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .control import (
    ActuatorSetpoint,
    ControllerConfig,
    ControlTarget,
    PoseHistory,
    actuation_step,
)
from .field_models import MagnetSpec
from .geometry import Pose
from .localization import EkfConfig, EstimatorState, initial_state, ls_initialize, track_step
from .sensing import (
    EnvironmentField,
    ImuNoise,
    PlacedMagnet,
    SensorArrayLayout,
    SensorFrame,
    estimate_environment,
    sample_array,
    sample_imu,
)
from .sim_world import Environment, WorldState, step as world_step


@dataclass
class LoopConfig:
    layout: SensorArrayLayout
    capsule_spec: MagnetSpec
    actuator_spec: MagnetSpec
    ekf: EkfConfig
    controller: ControllerConfig
    environment: Environment
    imu_noise: ImuNoise = field(default_factory=ImuNoise)
    control_divisor: int = 2  # control ticks every N sensor ticks
    calibration_frames: int = 100


@dataclass
class TickResult:
    time: float
    true_pose: Pose
    estimate: EstimatorState
    target: ControlTarget
    setpoint: ActuatorSetpoint
    frame: SensorFrame


class ClosedLoop:
    """Owns one live closed-loop session; deterministic given seed streams."""

    def __init__(
        self,
        cfg: LoopConfig,
        initial_probe_pose: Pose,
        env_truth: EnvironmentField,
        seed: int,
    ):
        self.cfg = cfg
        seq = np.random.SeedSequence(seed)
        s_cal, s_noise, s_imu = seq.spawn(3)
        self.rng_noise = np.random.default_rng(s_noise)
        self.rng_imu = np.random.default_rng(s_imu)
        self.env_truth = env_truth

        # environment calibration pass (no magnets present)
        rng_cal = np.random.default_rng(s_cal)
        cal_frames = [
            SensorFrame(
                timestamp=-1.0,
                raw_fields=sample_array(None, None, env_truth, cfg.layout, rng_cal),
                imu_accel=np.zeros(3),
                imu_gyro=np.zeros(3),
                imu_roll=0.0,
                imu_pitch=0.0,
            )
            for _ in range(cfg.calibration_frames)
        ]
        self.env_est = estimate_environment(cal_frames)

        self.world = WorldState(time=0.0, probe_pose=initial_probe_pose)
        self.capsule_moment = cfg.capsule_spec.dipole_moment_magnitude
        self.actuator_moment = cfg.actuator_spec.dipole_moment_magnitude

        # initial localization from a frame taken before the actuator moves in
        fields0 = sample_array(
            PlacedMagnet(initial_probe_pose, cfg.capsule_spec),
            None,
            env_truth,
            cfg.layout,
            self.rng_noise,
        )
        accel0, gyro0, roll0, pitch0 = sample_imu(
            initial_probe_pose, np.zeros(3), np.zeros(3), self.rng_imu, cfg.imu_noise
        )
        fix = ls_initialize(
            fields0 - self.env_est.per_sensor_bias,
            roll0,
            pitch0,
            cfg.layout,
            self.capsule_moment,
        )
        self.estimate = initial_state(fix, roll0, pitch0)
        self._history = PoseHistory(window=cfg.controller.velocity_window)
        self._history.push(0.0, self.estimate.full_pose)
        self.setpoint: ActuatorSetpoint | None = None
        self.tick_index = 0

    @property
    def dt(self) -> float:
        return self.cfg.ekf.dt

    def tick(self, target: ControlTarget) -> TickResult:
        """Advance one sensor period: control (at its divisor), physics,
        sensing, estimation."""
        cfg = self.cfg
        if self.setpoint is None or self.tick_index % cfg.control_divisor == 0:
            self.setpoint = actuation_step(
                self._history,
                self.estimate.full_pose,
                target,
                self.capsule_moment,
                self.actuator_moment,
                cfg.controller,
                warm_start=self.setpoint,
            )
        self.world = world_step(
            self.world,
            self.setpoint,
            cfg.controller.dynamics,
            cfg.environment,
            self.dt,
            self.capsule_moment,
            self.actuator_moment,
        )

        pose = self.world.probe_pose
        raw = sample_array(
            PlacedMagnet(pose, cfg.capsule_spec),
            PlacedMagnet(self.world.actuator_pose, cfg.actuator_spec),
            self.env_truth,
            cfg.layout,
            self.rng_noise,
        )
        accel, gyro, roll, pitch = sample_imu(
            pose,
            self.world.probe_accel,
            self.world.probe_angular_velocity,
            self.rng_imu,
            cfg.imu_noise,
        )
        frame = SensorFrame(self.world.time, raw, accel, gyro, roll, pitch)
        self.estimate = track_step(
            self.estimate,
            frame,
            PlacedMagnet(self.world.actuator_pose, cfg.actuator_spec),
            self.env_est,
            cfg.layout,
            self.capsule_moment,
            cfg.ekf,
        )
        self._history.push(self.world.time, self.estimate.full_pose)
        self.tick_index += 1
        return TickResult(
            time=self.world.time,
            true_pose=pose,
            estimate=self.estimate,
            target=target,
            setpoint=self.setpoint,
            frame=frame,
        )

    def apply_disturbance(self, force, duration: float) -> None:
        from .sim_world import apply_disturbance

        self.world = apply_disturbance(self.world, force, duration)


def moment_angle_error(estimated_dir: np.ndarray, desired_dir: np.ndarray) -> float:
    """Angle (rad) between moment directions, the 5-DOF orientation metric."""
    c = float(np.clip(np.dot(estimated_dir, desired_dir), -1.0, 1.0))
    return math.acos(c)
