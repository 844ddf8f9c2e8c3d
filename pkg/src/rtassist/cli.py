"""Command-line interface binding the pieces together.

Subcommands: gen-data, train, eval, predict, serve, replay. All file
outputs are deterministic under fixed seeds.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np


def _add_gen_data(sub):
    p = sub.add_parser("gen-data", help="generate a reach-trajectory dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--table-height", type=float, default=0.0)


def _add_train(sub):
    p = sub.add_parser("train", help="train the trajectory predictor")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--latent", type=int, default=5)
    p.add_argument("--components", type=int, default=4)
    p.add_argument("--horizon", type=int, default=20)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--anneal-beta", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--report", default=None)
    p.add_argument("--arch", choices=("rt", "vanilla"), default="rt")


def _add_eval(sub):
    p = sub.add_parser("eval", help="run an evaluation suite")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--suite", choices=("adefde", "intent", "autonomy"),
                   required=True)
    p.add_argument("--scene", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rounds", type=int, default=20)
    p.add_argument("--trajectories", type=int, default=50)
    p.add_argument("--out", default=None)


def _add_predict(sub):
    p = sub.add_parser("predict", help="predict a future path and goal belief")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--traj", required=True)
    p.add_argument("--t-obs", type=int, required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--scene", default=None)


def _add_serve(sub):
    p = sub.add_parser("serve", help="run the teleop service")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--port", type=int, default=8720)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--mode", choices=("teleop", "rt-assist", "maxent-assist"),
                   default="teleop")
    p.add_argument("--scene", default=None)
    p.add_argument("--seed", type=int, default=0)


def _add_replay(sub):
    p = sub.add_parser("replay", help="stream a recorded trajectory through the loop")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--traj", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--mode", choices=("teleop", "rt-assist", "maxent-assist"),
                   default="rt-assist")
    p.add_argument("--scene", default=None)
    p.add_argument("--out", default=None)


def build_parser():
    parser = argparse.ArgumentParser(prog="rtassist")
    sub = parser.add_subparsers(dest="command", required=True)
    for add in (_add_gen_data, _add_train, _add_eval, _add_predict, _add_serve,
                _add_replay):
        add(sub)
    return parser


def _load_scene(path):
    from .scene import cube_layout, load_scene

    return load_scene(path) if path else cube_layout()


def cmd_gen_data(args) -> int:
    from .simdata import GenConfig, generate_dataset, write_dataset

    cfg = GenConfig(table_height=args.table_height, seed=args.seed)
    trajs, stats = generate_dataset(cfg, args.n, seed=args.seed)
    write_dataset(trajs, args.out)
    print(f"wrote {len(trajs)} trajectories to {args.out} "
          f"(discarded {stats['discarded']})")
    return 0


def cmd_train(args) -> int:
    from .model import ModelConfig, RTModel
    from .simdata import read_dataset, split_dataset
    from .training import TrainConfig, train

    trajs = read_dataset(args.data)
    train_trajs, val_trajs = split_dataset(trajs)
    mcfg = ModelConfig(hidden_size=args.hidden, latent_dims=args.latent,
                       gmm_components=args.components, horizon=args.horizon)
    tcfg = TrainConfig(lr=args.lr, batch_size=args.batch, epochs=args.epochs,
                       beta=args.beta, anneal_beta=args.anneal_beta,
                       seed=args.seed)
    if args.arch == "vanilla":
        from .evalsuite import VanillaLSTM, train_vanilla

        model = VanillaLSTM(mcfg, seed=args.seed)
        train_vanilla(model, train_trajs, val_trajs, tcfg, args.out)
    else:
        model = RTModel(mcfg, seed=args.seed)
        train(model, train_trajs, val_trajs, tcfg, args.out,
              report_path=args.report)
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .model import load_model
    from .scene import cube_layout

    scene = _load_scene(args.scene)
    if args.suite == "adefde":
        from .evalsuite import evaluate_model
        from .simdata import read_dataset, split_dataset

        if not args.data:
            print("eval --suite adefde requires --data", file=sys.stderr)
            return 2
        model = load_model(args.ckpt)
        _, test_trajs = split_dataset(read_dataset(args.data))
        m = evaluate_model(model, test_trajs, seed=args.seed)
        for k, v in m.as_dict().items():
            print(f"{k} {v:.2f} mm")
        if args.out:
            from .evalsuite import write_records

            write_records(args.out, [{"suite": "adefde", **m.as_dict()}])
        return 0

    if args.suite == "intent":
        from .evalsuite import intent_change_experiment, synthesize_intent_set

        model = load_model(args.ckpt)
        trajs = synthesize_intent_set(scene, args.trajectories, seed=args.seed)
        reports = intent_change_experiment(model, trajs, scene, seed=args.seed)
        records = []
        for name, rep in reports.items():
            print(f"{name}: accuracy {rep.accuracy:.3f}  "
                  f"adaptability {rep.adaptability:.3f}  "
                  f"robustness {json.dumps(rep.as_dict()['robustness'])}")
            records.append({"suite": "intent", "method": name, **rep.as_dict()})
        if args.out:
            from .evalsuite import write_records

            write_records(args.out, records)
        return 0

    # autonomy
    from .evalsuite import scripted_autonomy_experiment, summary_table, write_records

    model = load_model(args.ckpt)
    results = scripted_autonomy_experiment(model, scene, rounds=args.rounds,
                                           seed=args.seed)
    print(summary_table(results))
    if args.out:
        write_records(args.out, [{"suite": "autonomy", "method": k, **v}
                                 for k, v in results.items()])
    return 0


def cmd_predict(args) -> int:
    from .model import load_model
    from .prediction import Predictor
    from .simdata import read_dataset

    model = load_model(args.ckpt)
    trajs = read_dataset(args.traj)
    if not (0 <= args.index < len(trajs)):
        print(f"--index {args.index} out of range ({len(trajs)} trajectories)",
              file=sys.stderr)
        return 2
    traj = trajs[args.index]
    if not (2 <= args.t_obs <= len(traj) - 1):
        print(f"--t-obs {args.t_obs} outside [2, {len(traj) - 1}]", file=sys.stderr)
        return 2
    scene = _load_scene(args.scene)
    predictor = Predictor(model)
    history = traj.positions[: args.t_obs + 1]
    res = predictor.most_likely(history)
    belief = predictor.goal_belief(history, scene.goals, scene.table_height)
    print(json.dumps({"type": "pred_path", "positions": res.positions.tolist()}))
    print(json.dumps({
        "type": "goal_belief",
        "goals": belief.goals.tolist(),
        "probs": belief.probs.tolist(),
        "densities": belief.densities.tolist(),
        "low_confidence": belief.low_confidence,
    }))
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .model import load_model
    from .service import Session, build_app

    model = load_model(args.ckpt) if args.ckpt else None
    if args.mode == "rt-assist" and model is None:
        print("serve --mode rt-assist requires --ckpt", file=sys.stderr)
        return 2
    scene = _load_scene(args.scene)
    session = Session(scene=scene, mode=args.mode, model=model, seed=args.seed)
    app = build_app(session)
    port = int(os.environ.get("TELEOP_PORT", args.port))
    uvicorn.run(app, host=args.host, port=port, log_level="warning")
    return 0


def cmd_replay(args) -> int:
    from .model import load_model
    from .service import Session, commands_from_trajectory, replay_commands
    from .simdata import read_dataset

    model = load_model(args.ckpt) if args.ckpt else None
    if args.mode == "rt-assist" and model is None:
        print("replay --mode rt-assist requires --ckpt", file=sys.stderr)
        return 2
    trajs = read_dataset(args.traj)
    if not (0 <= args.index < len(trajs)):
        print(f"--index {args.index} out of range", file=sys.stderr)
        return 2
    traj = trajs[args.index]
    scene = _load_scene(args.scene)
    session = Session(scene=scene, mode=args.mode, model=model, seed=0)
    session.reset(start=traj.positions[0])
    states = replay_commands(session, commands_from_trajectory(traj))
    lines = [json.dumps(st) for st in states]
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        print(f"wrote {len(lines)} states to {args.out}")
    else:
        for line in lines:
            print(line)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "serve": cmd_serve,
    "replay": cmd_replay,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return COMMANDS[args.command](args)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
