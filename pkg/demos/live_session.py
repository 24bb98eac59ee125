"""Drive the websocket service end to end: start it in-process, stream
frames, flip the guidance scale mid-stream, stop cleanly.

Needs a trained bundle; run demos/train_and_generate.py first or point
CHECKPOINTS somewhere else.
"""

import json
from pathlib import Path

from starlette.testclient import TestClient

from gestream.service import create_app

CHECKPOINTS = Path("demo_checkpoints")
if not (CHECKPOINTS / "generator.ckpt").exists():
    raise SystemExit("no bundle found; run demos/train_and_generate.py first")

app = create_app(checkpoint_dir=CHECKPOINTS, seed=0)
client = TestClient(app)

with client.websocket_connect("/session") as ws:
    hello = ws.receive_json()
    print("skeleton:", len(hello["joint_names"]), "joints")

    ws.send_text(json.dumps({"type": "start"}))
    for _ in range(10):
        msg = ws.receive_json()
        if msg["type"] == "frame":
            w = msg["joints"][14]       # left wrist, see hello["joint_names"]
            print(f"t={msg['t']:3d} va={msg['va_prob']:.2f} "
                  f"wrist=({w[0]:+.2f}, {w[1]:+.2f}, {w[2]:+.2f})")

    # turn guidance up; the change is echoed as a status message before
    # the first frames generated under it
    ws.send_text(json.dumps({"type": "control", "cfg": 3.0}))
    while True:
        msg = ws.receive_json()
        if msg["type"] == "status":
            print("applied:", {k: msg[k] for k in ("cfg", "step")})
            break

    ws.send_text(json.dumps({"type": "stop"}))
    while True:
        msg = ws.receive_json()
        if msg["type"] == "status" and "total_steps" in msg:
            print("done:", msg["total_steps"], "steps,",
                  msg["overruns"], "overruns")
            break
