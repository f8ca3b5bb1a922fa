"""Live teleoperation service: one closed-loop session (simulation, estimator,
controller) advanced on a real-time-paced asyncio task, a 20 Hz state
broadcast, and a JSON-over-WebSocket command channel.

Protocol (all numbers SI):

* server -> client, type "state": timestamp, tick, running flag, estimated and
  true poses, active target, actuator setpoint, and tracking errors computed
  from exactly the embedded quantities.
* client -> server, type "command": {"id": str, "action": ...} where action is
  one of advance/withdraw/turn_left/turn_right/anteflex/retroflex/flex_left/
  flex_right (field "amount", m or rad), set_absolute {position, moment_dir},
  pause, resume, disturb {force, duration}, set_gains {kp, kd, kpo, kdo}.
* server -> client, type "ack": {"id", "ok", "seq", "target"?, "reason"?};
  every command is acknowledged exactly once, in application order.
* malformed input gets type "error" and the connection stays open.
"""

from __future__ import annotations

import asyncio
import json
import math
import time
from dataclasses import dataclass, replace
from typing import Any

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect

from .control import (
    ClinicalCommand,
    CommandClampError,
    ControlGains,
    ControlTarget,
    apply_command_to_pose,
)
from .experiments import Scenario, environment_truth, loop_config_for
from .geometry import Pose, euler_to_matrix
from .loop import ClosedLoop, TickResult, moment_angle_error

_ACTION_MAP = {
    # action name -> (ClinicalCommand kind, sign)
    "advance": ("advance", 1.0),
    "withdraw": ("advance", -1.0),
    "turn_right": ("turn", 1.0),
    "turn_left": ("turn", -1.0),
    "anteflex": ("anteflex", -1.0),
    "retroflex": ("anteflex", 1.0),
    "flex_left": ("flex", 1.0),
    "flex_right": ("flex", -1.0),
}


class ProtocolError(ValueError):
    pass


def _vec(x) -> list[float]:
    return [float(v) for v in x]


@dataclass
class PendingCommand:
    websocket: Any
    payload: dict
    seq: int


def initial_probe_pose(scenario: Scenario) -> Pose:
    """Session start pose consistent with the scenario's environment."""
    env = scenario.build_environment()
    if env.kind == "tube":
        cl = env.centerline
        m0 = cl.moment_dir(0.0)
        t0 = cl.tangent(0.0)
        return Pose(cl.position(0.0), np.column_stack([t0, np.cross(m0, t0), m0]))
    if env.kind == "plane_channel":
        down = euler_to_matrix(math.pi, 0.0, 0.0)
        x0 = float(scenario.params.get("x_start", -0.15))
        return Pose(np.array([x0, 0.0, env.z_level]), down)
    return Pose(np.array([0.0, 0.0, 0.10]))


class TeleopSession:
    """Single live session; all mutation happens on the event loop thread."""

    def __init__(self, scenario: Scenario, seed: int = 1):
        self.scenario = scenario
        self.loop = ClosedLoop(
            loop_config_for(scenario),
            initial_probe_pose(scenario),
            environment_truth(scenario, seed),
            seed,
        )
        est = self.loop.estimate.full_pose
        self.target_pose = est
        self.running = True
        self.tick_index = 0
        self.seq = 0
        self.latest: TickResult | None = None
        self.queue: list[PendingCommand] = []
        self.session_id = f"session-{int(time.time())}"

    @property
    def target(self) -> ControlTarget:
        return ControlTarget(self.target_pose.position, self.target_pose.moment_dir)

    # -- command handling ---------------------------------------------------

    def enqueue(self, websocket, payload: dict) -> PendingCommand:
        self.seq += 1
        cmd = PendingCommand(websocket, payload, self.seq)
        self.queue.append(cmd)
        return cmd

    def _apply(self, payload: dict) -> dict:
        action = payload.get("action")
        if action == "pause":
            self.running = False
            return {"ok": True}
        if action == "resume":
            self.running = True
            return {"ok": True}
        if action == "disturb":
            force = payload.get("force")
            duration = payload.get("duration")
            if force is None or duration is None:
                raise ProtocolError("disturb requires force and duration")
            self.loop.apply_disturbance(
                np.asarray(force, dtype=float), float(duration)
            )
            return {"ok": True}
        if action == "set_gains":
            gains = ControlGains(
                kp=payload.get("kp", 5.0),
                kd=payload.get("kd", 1.0),
                kpo=payload.get("kpo", 0.02),
                kdo=payload.get("kdo", 0.005),
            )
            ctl = replace(self.loop.cfg.controller, gains=gains)
            self.loop.cfg.controller = ctl
            return {"ok": True}
        if action == "set_absolute":
            try:
                target = ControlTarget(
                    np.asarray(payload["position"], dtype=float),
                    np.asarray(payload["moment_dir"], dtype=float),
                )
            except (KeyError, ValueError) as exc:
                raise ProtocolError(f"bad absolute target: {exc}") from exc
            cmd = ClinicalCommand("set_absolute", absolute_target=target)
            self.target_pose = apply_command_to_pose(self.target_pose, cmd)
            return {"ok": True, "target": self._target_payload()}
        if action in _ACTION_MAP:
            kind, sign = _ACTION_MAP[action]
            amount = payload.get("amount")
            if amount is None:
                raise ProtocolError(f"{action} requires an amount")
            cmd = ClinicalCommand(kind, sign * float(amount))
            try:
                self.target_pose = apply_command_to_pose(self.target_pose, cmd)
            except CommandClampError as exc:
                return {"ok": False, "reason": str(exc)}
            return {"ok": True, "target": self._target_payload()}
        raise ProtocolError(f"unknown action {action!r}")

    def drain_queue(self) -> list[tuple[PendingCommand, dict]]:
        """Apply queued commands in arrival order; returns (command, ack)."""
        done = []
        for cmd in self.queue:
            try:
                result = self._apply(cmd.payload)
            except ProtocolError as exc:
                result = {"ok": False, "reason": str(exc)}
            ack = {
                "type": "ack",
                "id": cmd.payload.get("id"),
                "seq": cmd.seq,
                **result,
            }
            done.append((cmd, ack))
        self.queue.clear()
        return done

    # -- stepping and state -------------------------------------------------

    def tick(self) -> None:
        if not self.running:
            return
        self.latest = self.loop.tick(self.target)
        self.tick_index += 1

    def _target_payload(self) -> dict:
        t = self.target
        return {
            "position": _vec(t.desired_position),
            "moment_dir": _vec(t.desired_moment_dir),
        }

    def state_message(self) -> dict:
        res = self.latest
        target = self.target
        if res is None:
            est_pose = self.loop.estimate.full_pose
            true_pose = self.loop.world.probe_pose
            setpoint = None
            t = 0.0
        else:
            est_pose = res.estimate.full_pose
            true_pose = res.true_pose
            setpoint = res.setpoint
            t = res.time
        pos_err = float(np.linalg.norm(target.desired_position - est_pose.position))
        orient_err = moment_angle_error(est_pose.moment_dir, target.desired_moment_dir)
        msg = {
            "type": "state",
            "session": self.session_id,
            "t": t,
            "tick": self.tick_index,
            "running": self.running,
            "estimated": {
                "position": _vec(est_pose.position),
                "moment_dir": _vec(est_pose.moment_dir),
                "yaw_frozen": bool(self.loop.estimate.yaw_frozen),
            },
            "true": {
                "position": _vec(true_pose.position),
                "moment_dir": _vec(true_pose.moment_dir),
            },
            "target": self._target_payload(),
            "errors": {"position": pos_err, "orientation": orient_err},
        }
        if setpoint is not None:
            msg["setpoint"] = {
                "position": _vec(setpoint.position),
                "moment_dir": _vec(setpoint.moment_dir),
                "residual": float(setpoint.residual),
                "infeasible": bool(setpoint.infeasible),
            }
        if self.loop.world.actuator_pose is not None:
            msg["actuator"] = {
                "position": _vec(self.loop.world.actuator_pose.position),
                "moment_dir": _vec(self.loop.world.actuator_pose.moment_dir),
            }
        return msg


def create_app(scenario: Scenario, state_rate: float = 20.0, seed: int = 1) -> FastAPI:
    app = FastAPI(title="magprobe teleoperation service")
    session = TeleopSession(scenario, seed=seed)
    clients: set[WebSocket] = set()
    app.state.session = session

    async def physics_task():
        dt = session.loop.dt
        next_t = time.monotonic()
        while True:
            for cmd, ack in session.drain_queue():
                try:
                    await cmd.websocket.send_text(json.dumps(ack))
                except Exception:
                    pass
            session.tick()
            next_t += dt
            delay = next_t - time.monotonic()
            if delay > 0:
                await asyncio.sleep(delay)
            else:
                next_t = time.monotonic()
                await asyncio.sleep(0)

    async def broadcast_task():
        period = 1.0 / state_rate
        next_t = time.monotonic()
        while True:
            if clients:
                text = json.dumps(session.state_message())
                dead = []
                for ws in clients:
                    try:
                        await ws.send_text(text)
                    except Exception:
                        dead.append(ws)
                for ws in dead:
                    clients.discard(ws)
            next_t += period
            delay = next_t - time.monotonic()
            if delay > 0:
                await asyncio.sleep(delay)
            else:
                next_t = time.monotonic()
                await asyncio.sleep(0)

    @app.on_event("startup")
    async def _startup():
        app.state.tasks = [
            asyncio.create_task(physics_task()),
            asyncio.create_task(broadcast_task()),
        ]

    @app.on_event("shutdown")
    async def _shutdown():
        for task in getattr(app.state, "tasks", []):
            task.cancel()

    @app.get("/health")
    async def health():
        return {
            "status": "ok",
            "session": session.session_id,
            "running": session.running,
            "t": session.latest.time if session.latest else 0.0,
        }

    @app.get("/scenario")
    async def scenario_doc():
        return session.scenario.to_dict()

    @app.websocket("/session")
    async def session_ws(websocket: WebSocket):
        await websocket.accept()
        clients.add(websocket)
        try:
            while True:
                text = await websocket.receive_text()
                try:
                    payload = json.loads(text)
                except json.JSONDecodeError as exc:
                    await websocket.send_text(
                        json.dumps({"type": "error", "reason": f"bad json: {exc}"})
                    )
                    continue
                if not isinstance(payload, dict) or payload.get("type") != "command":
                    await websocket.send_text(
                        json.dumps(
                            {
                                "type": "error",
                                "id": payload.get("id") if isinstance(payload, dict) else None,
                                "reason": "expected a command message",
                            }
                        )
                    )
                    continue
                session.enqueue(websocket, payload)
        except WebSocketDisconnect:
            pass
        finally:
            clients.discard(websocket)

    return app


def serve(
    scenario: Scenario,
    host: str = "127.0.0.1",
    port: int = 8720,
    state_rate: float = 20.0,
) -> None:
    """Run the service until interrupted."""
    import uvicorn

    uvicorn.run(create_app(scenario, state_rate=state_rate), host=host, port=port)
