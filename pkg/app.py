import argparse
import json
import logging
import sys

from dotenv import load_dotenv

from config import ConfigError, load_config, parse_overrides
from field_engine.idu import ViewpointEditError
from field_engine.optimizer import DivergenceError
from field_engine.renderer import EmptyFieldError
from services.checkpoint_service import CheckpointFormatError
from services.dataset_service import DatasetFormatError
from services.editor_service import RemoteError
from services.pipeline_service import (
    PipelineInputError, cmd_compose, cmd_edit, cmd_edit_baseline, cmd_eval, cmd_gen_data, cmd_inpaint, cmd_pipeline,
    cmd_train,
)
from services.synth_service import SceneSpecError

load_dotenv()

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_DIVERGENCE = 3
EXIT_REMOTE = 4

INPUT_ERRORS = (ConfigError, SceneSpecError, DatasetFormatError, CheckpointFormatError, PipelineInputError,
                EmptyFieldError, OSError, ValueError)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="radiant",
        description="Disentangled voxel radiance fields: generate, train, edit, compose and evaluate.",
        epilog="Any config field can be overridden with a dot-path flag, e.g. --idu.d 2 --object_train.iterations 400",
    )
    parser.add_argument("--config", help="JSON pipeline config")
    parser.add_argument("--seed", type=int, help="global seed")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--quiet", action="store_true", help="only log warnings and errors")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", help="render the synthetic ground-truth datasets")
    sub.add_parser("inpaint", help="build background training views from the full-scene images")
    train = sub.add_parser("train", help="fit the object or background field")
    train.add_argument("target", choices=["object", "background"])
    sub.add_parser("edit", help="run the iterative dataset update on the object field")
    sub.add_parser("edit-baseline", help="edit a whole-scene field with full-frame masks, for comparison")
    sub.add_parser("compose", help="render the transformed object merged with the background")
    sub.add_parser("eval", help="write the metrics report")
    sub.add_parser("pipeline", help="run every stage in order")
    return parser


def run(args, overrides: dict) -> dict:
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    cfg = load_config(args.config, overrides)

    if args.command == "gen-data":
        return cmd_gen_data(cfg)
    if args.command == "inpaint":
        return cmd_inpaint(cfg)
    if args.command == "train":
        return cmd_train(cfg, args.target)
    if args.command == "edit":
        return cmd_edit(cfg)
    if args.command == "edit-baseline":
        return cmd_edit_baseline(cfg)
    if args.command == "compose":
        return cmd_compose(cfg)
    if args.command == "eval":
        return cmd_eval(cfg)
    return cmd_pipeline(cfg)


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)

    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO)

    try:
        overrides = parse_overrides(extra)
        result = run(args, overrides)
    except DivergenceError as e:
        logger.error(f"❌ {e}")
        return EXIT_DIVERGENCE
    except RemoteError as e:
        logger.error(f"❌ Remote failure: {e}")
        return EXIT_REMOTE
    except ViewpointEditError as e:
        logger.error(f"❌ Edit failed at {e}")
        return EXIT_REMOTE if isinstance(e.cause, RemoteError) else EXIT_INPUT
    except INPUT_ERRORS as e:
        logger.error(f"❌ {e}")
        return EXIT_INPUT

    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
