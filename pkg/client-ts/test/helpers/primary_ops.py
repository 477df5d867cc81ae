"""Primary-client operations driven by the TypeScript integration suite.

Each subcommand performs one action through the primary client library and
prints a single JSON line, so the cross-language tests can compare what
both clients see byte for byte.
"""

import argparse
import base64
import json
import sys

import numpy as np

from tensorgrid.client import connect
from tensorgrid.engine import Dense, ModelSpec, ScriptSpec, Step, Tanh, dump_model, dump_script
from tensorgrid.tensors import deserialize_tensor, serialize_tensor, tensor_from_array


def cmd_put(args):
    with connect(args.seed) as c:
        c.put_tensor(args.key, deserialize_tensor(base64.b64decode(args.b64)))
    return {"ok": True}


def cmd_get(args):
    with connect(args.seed) as c:
        t = c.get_tensor(args.key)
    return {"ok": True, "b64": base64.b64encode(serialize_tensor(t)).decode()}


def cmd_make_model(args):
    rng = np.random.default_rng(args.seed_value)
    w = args.width
    spec = ModelSpec(
        args.name,
        (
            Dense(w, w, rng.normal(0, 0.4, (w, w)).astype(np.float32),
                  rng.normal(0, 0.1, w).astype(np.float32)),
            Tanh(),
            Dense(w, w, rng.normal(0, 0.4, (w, w)).astype(np.float32),
                  rng.normal(0, 0.1, w).astype(np.float32)),
        ),
    )
    return {"ok": True, "b64": base64.b64encode(dump_model(spec)).decode()}


def cmd_make_script(args):
    spec = ScriptSpec(args.name, 1, (Step(0, "affine", {"a": 2.0, "b": 1.0}),), "single")
    return {"ok": True, "b64": base64.b64encode(dump_script(spec)).decode()}


def cmd_make_tensor(args):
    rng = np.random.default_rng(args.seed_value)
    arr = rng.normal(0, 1, (args.rows, args.width)).astype(np.float32)
    return {"ok": True, "b64": base64.b64encode(serialize_tensor(tensor_from_array(arr))).decode()}


def cmd_set_model(args):
    with connect(args.seed) as c:
        c.set_model(args.name, base64.b64decode(args.b64), batch_size=args.batch_size)
    return {"ok": True}


def cmd_set_script(args):
    with connect(args.seed) as c:
        c.set_script(args.name, base64.b64decode(args.b64))
    return {"ok": True}


def cmd_run_model(args):
    with connect(args.seed) as c:
        c.run_model(args.name, args.inputs.split(","), args.outputs.split(","))
    return {"ok": True}


def cmd_run_script(args):
    with connect(args.seed) as c:
        c.run_script(args.name, args.inputs.split(","), args.output)
    return {"ok": True}


def main():
    parser = argparse.ArgumentParser()
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("put")
    p.add_argument("--seed", required=True)
    p.add_argument("--key", required=True)
    p.add_argument("--b64", required=True)
    p.set_defaults(fn=cmd_put)

    p = sub.add_parser("get")
    p.add_argument("--seed", required=True)
    p.add_argument("--key", required=True)
    p.set_defaults(fn=cmd_get)

    p = sub.add_parser("make-model")
    p.add_argument("--name", default="xmodel")
    p.add_argument("--width", type=int, default=8)
    p.add_argument("--seed-value", type=int, default=0)
    p.set_defaults(fn=cmd_make_model)

    p = sub.add_parser("make-script")
    p.add_argument("--name", default="xscript")
    p.set_defaults(fn=cmd_make_script)

    p = sub.add_parser("make-tensor")
    p.add_argument("--rows", type=int, default=4)
    p.add_argument("--width", type=int, default=8)
    p.add_argument("--seed-value", type=int, default=0)
    p.set_defaults(fn=cmd_make_tensor)

    p = sub.add_parser("set-model")
    p.add_argument("--seed", required=True)
    p.add_argument("--name", required=True)
    p.add_argument("--b64", required=True)
    p.add_argument("--batch-size", type=int, default=1)
    p.set_defaults(fn=cmd_set_model)

    p = sub.add_parser("set-script")
    p.add_argument("--seed", required=True)
    p.add_argument("--name", required=True)
    p.add_argument("--b64", required=True)
    p.set_defaults(fn=cmd_set_script)

    p = sub.add_parser("run-model")
    p.add_argument("--seed", required=True)
    p.add_argument("--name", required=True)
    p.add_argument("--inputs", required=True)
    p.add_argument("--outputs", required=True)
    p.set_defaults(fn=cmd_run_model)

    p = sub.add_parser("run-script")
    p.add_argument("--seed", required=True)
    p.add_argument("--name", required=True)
    p.add_argument("--inputs", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(fn=cmd_run_script)

    args = parser.parse_args()
    try:
        result = args.fn(args)
    except Exception as e:
        print(json.dumps({"ok": False, "error": f"{type(e).__name__}: {e}"}))
        return 1
    print(json.dumps(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
