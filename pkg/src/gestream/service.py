"""Websocket streaming service.

One generation loop per connected session, paced at one token step per
80 ms (2 motion frames per step).  Steps are never dropped: a slow
client gets stale frames discarded from its outgoing queue while the
causal generation state keeps advancing contiguously.  Live voice
activity, identity and sampling controls apply from the next step.
"""

from __future__ import annotations

import asyncio
import json
import socket
import time
from collections import deque

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect

from . import __version__
from .conditions import LiveSyntheticSource
from .config import FRAMES_PER_STEP
from .errors import GestreamError, PortInUse
from .generator import GenerationSession
from .motion import split_regions
from .pipeline import load_bundle

STEP_PERIOD_S = 0.08
QUEUE_FRAMES = 50

CONTROL_KEYS = ("va", "identity", "top_p_t", "top_p_k",
                "temperature", "cfg", "raw")


class SessionHandle:
    """State for one websocket session: the generation session, its live
    condition source and the pending control set."""

    def __init__(self, bundle, seed: int):
        preset, spec, codecs, params, gen_cfg = bundle
        self.spec = spec
        self.session = GenerationSession(params, gen_cfg, codecs=codecs,
                                         seed=seed)
        self.source = LiveSyntheticSource(seed, identity=0,
                                          d=gen_cfg.d_model,
                                          k_speech=gen_cfg.k_speech,
                                          k_text=gen_cfg.k_text)
        self.raw = False
        self.overruns = 0
        self.pending: dict = {}
        # frames waiting for the sender task; oldest dropped on overflow
        self.queue: deque = deque(maxlen=QUEUE_FRAMES)
        self.queue_event = asyncio.Event()
        self.running = False

    def apply_controls(self) -> dict:
        """Applies the pending control set before the next step; returns
        the applied subset for the status echo."""
        applied = {}
        c = self.pending
        self.pending = {}
        if "va" in c:
            self.source.va = int(c["va"])
            applied["va"] = self.source.va
        if "identity" in c:
            ident = int(c["identity"])
            if 0 <= ident < self.session.cfg.n_identities:
                self.source.identity = ident
                applied["identity"] = ident
        if "top_p_t" in c:
            self.session.top_p_temporal = float(c["top_p_t"])
            applied["top_p_t"] = self.session.top_p_temporal
        if "top_p_k" in c:
            self.session.top_p_kinematic = float(c["top_p_k"])
            applied["top_p_k"] = self.session.top_p_kinematic
        if "temperature" in c:
            self.session.temperature = float(c["temperature"])
            applied["temperature"] = self.session.temperature
        if "cfg" in c:
            self.session.cfg_scale = float(c["cfg"])
            applied["cfg"] = self.session.cfg_scale
        if "raw" in c:
            self.raw = bool(c["raw"])
            applied["raw"] = self.raw
        return applied

    def step_messages(self) -> list:
        """Runs one generation step; returns the two frame messages."""
        cond = self.source.next()
        row, frames, va_prob, latency_ms = self.session.generate_step(cond)
        step = self.session.step - 1
        block = np.concatenate([frames["upper"], frames["lower"],
                                frames["face"]], axis=1)
        motion = split_regions(block, self.spec)
        joints = motion.joint_positions(self.spec)
        expr = motion.expressions(self.spec)
        out = []
        for i in range(FRAMES_PER_STEP):
            msg = {"type": "frame",
                   "t": FRAMES_PER_STEP * step + i,
                   "joints": [[round(v, 5) for v in p] for p in joints[i]],
                   "expr": [round(v, 5) for v in expr[i]],
                   "va_prob": float(va_prob),
                   "latency_ms": float(latency_ms)}
            if self.raw:
                msg["raw"] = list(block[i])
            out.append(msg)
        return out

    def status(self, **extra) -> dict:
        msg = {"type": "status",
               "step": self.session.step,
               "overruns": self.overruns,
               "va": self.source.va,
               "identity": self.source.identity,
               "top_p_t": self.session.top_p_temporal,
               "top_p_k": self.session.top_p_kinematic,
               "temperature": self.session.temperature,
               "cfg": self.session.cfg_scale,
               "parents": [int(p) for p in self.spec.parent],
               "joint_names": list(self.spec.names)}
        msg.update(extra)
        return msg


def create_app(checkpoint_dir=None, seed: int = 0, bundle=None):
    """FastAPI app; the model bundle loads once and is shared read-only
    across sessions."""
    if bundle is None:
        bundle = load_bundle(checkpoint_dir)

    app = FastAPI()
    app.state.bundle = bundle
    app.state.seed = seed

    @app.get("/healthz")
    async def healthz():
        return {"status": "ok", "name": "gestream", "version": __version__}

    @app.websocket("/session")
    async def session_socket(ws: WebSocket):
        await ws.accept()
        handle = SessionHandle(app.state.bundle, app.state.seed)
        loop_task = None
        send_task = asyncio.ensure_future(_sender(ws, handle))
        try:
            await ws.send_json(handle.status())
            while True:
                try:
                    text = await ws.receive_text()
                except WebSocketDisconnect:
                    return
                try:
                    msg = json.loads(text)
                    if not isinstance(msg, dict) or "type" not in msg:
                        raise ValueError("not a message object")
                except ValueError as exc:
                    await ws.send_json({"type": "error", "code": "bad_json",
                                        "message": str(exc)})
                    await ws.close()
                    return
                kind = msg["type"]
                if kind == "start":
                    if loop_task is None:
                        handle.running = True
                        loop_task = asyncio.ensure_future(_step_loop(handle))
                    await ws.send_json(handle.status(running=True))
                elif kind == "stop":
                    handle.running = False
                    if loop_task is not None:
                        await loop_task
                        loop_task = None
                    # flush queued frames before the final status
                    while handle.queue:
                        await ws.send_json(handle.queue.popleft())
                    await ws.send_json(handle.status(
                        running=False, total_steps=handle.session.step))
                    await ws.close()
                    return
                elif kind == "control":
                    handle.pending.update(
                        {k: msg[k] for k in CONTROL_KEYS if k in msg})
                    if loop_task is None:
                        # no loop running; apply and acknowledge now
                        handle.apply_controls()
                        handle.queue.append(handle.status())
                        handle.queue_event.set()
                else:
                    await ws.send_json({"type": "error",
                                        "code": "unknown_type",
                                        "message": f"unknown type {kind!r}"})
        except GestreamError as exc:
            try:
                await ws.send_json({"type": "error", "code": "session",
                                    "message": str(exc)})
                await ws.close()
            except Exception:
                pass
        finally:
            handle.running = False
            if loop_task is not None:
                loop_task.cancel()
            send_task.cancel()
            handle.session.close()

    return app


async def _step_loop(handle: SessionHandle):
    """Paces steps at t0 + n*80 ms; late steps still emit (overrun count
    increments), tokens are never skipped."""
    loop = asyncio.get_event_loop()
    t0 = time.monotonic()
    n = 0
    while handle.running:
        target = t0 + n * STEP_PERIOD_S
        delay = target - time.monotonic()
        if delay > 0:
            await asyncio.sleep(delay)
        elif n > 0:
            handle.overruns += 1
        applied = handle.apply_controls()
        msgs = await loop.run_in_executor(None, handle.step_messages)
        if applied:
            # echo precedes the first frames generated under new controls
            handle.queue.append(handle.status())
        handle.queue.extend(msgs)
        handle.queue_event.set()
        n += 1


async def _sender(ws, handle: SessionHandle):
    """Drains the frame queue to the socket; generation never awaits the
    socket because the queue bounds itself by dropping oldest frames."""
    while True:
        await handle.queue_event.wait()
        handle.queue_event.clear()
        while handle.queue:
            msg = handle.queue.popleft()
            await ws.send_json(msg)


def bind_port(host: str, port: int) -> socket.socket:
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        sock.bind((host, port))
    except OSError as exc:
        sock.close()
        raise PortInUse(f"cannot bind {host}:{port}: {exc}") from exc
    sock.listen(128)
    return sock


def serve(checkpoint_dir, port: int = 8765, host: str = "127.0.0.1",
          seed: int = 0) -> None:
    """Blocking entry point; binds the socket first so a busy port fails
    fast with PortInUse before the model loads."""
    import uvicorn

    sock = bind_port(host, port)
    app = create_app(checkpoint_dir, seed=seed)
    config = uvicorn.Config(app, log_level="warning")
    server = uvicorn.Server(config)
    server.run(sockets=[sock])
