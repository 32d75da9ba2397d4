"""
Task Groupings Regularization pipeline
Command-line orchestrator: builds the teacher zoo, recovers pseudo-tasks, embeds and
groups them, meta-trains with implicit gradient regularization and cross-task replay,
and evaluates on held-out few-shot episodes. Every stage reads the artifacts of the
previous ones from the output directory.
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence

import numpy as np
import torch
from dotenv import load_dotenv
from pydantic import ValidationError

from models.config import RunConfig, apply_overrides, load_raw_config
from models.data import ImageDataset
from models.errors import ConfigValidationError, NumericFailureError, RejectedInputError
from models.task import GroupAssignment
from models.zoo import ModelPool
from services import evaluation_service, grouping_service
from services import meta_train_service as meta_service
from services.artifact_service import (
    derive_seed,
    read_json,
    read_matrix_csv,
    require,
    write_csv,
    write_json,
    write_matrix_csv,
    write_npz,
)
from services.dataset_service import load_image_folder, make_synthetic_domains
from services.embedding_service import PROBE_ID, EmbeddingService, build_probe, probe_from_record
from services.inversion_service import InversionService, load_task, save_task
from services.plot_service import plot_artifacts
from services.zoo_service import ModelStore, build_overlap_pool, build_pool, cover_rate

# Load environment variables
load_dotenv()

logger = logging.getLogger("tgr")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC = 0, 1, 2
CKA_BATCH = 64


class Pipeline:
    """Stage runner bound to one resolved config and its output directory."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.out = Path(config.output_dir)
        self.seed = config.seed
        self._dataset: Optional[ImageDataset] = None

    # Shared inputs
    @property
    def dataset(self) -> ImageDataset:
        if self._dataset is None:
            ds = self.config.dataset
            if ds.kind == "folder":
                self._dataset = load_image_folder(Path(ds.root), Path(ds.split_file), ds.image_size)
            else:
                self._dataset = make_synthetic_domains(ds, derive_seed(self.seed, "dataset"))
        return self._dataset

    def inversion(self) -> InversionService:
        return InversionService(
            self.config.inversion, seed=derive_seed(self.seed, "generator"), dump_dir=self.out / "inversion"
        )

    def pool(self) -> ModelPool:
        require(self.out / "zoo", "zoo-build")
        pool = ModelStore(self.out / "zoo").load_pool()
        if not pool.records:
            raise ConfigValidationError(f"no records under {self.out / 'zoo'}; run `zoo-build` first", stage="zoo-build")
        return pool

    def groups(self) -> GroupAssignment:
        payload = read_json(require(self.out / "groups.json", "group"))
        return GroupAssignment(group_of=payload["group_of"], c=payload["c"])

    # Stages
    def zoo_build(self) -> None:
        pool = build_pool(self.dataset, self.config.zoo, derive_seed(self.seed, "zoo"))
        ModelStore(self.out / "zoo").save_pool(pool)
        rate = cover_rate(pool, self.dataset)
        write_json(self.out / "zoo" / "pool.json", {
            "ids": pool.ids(),
            "cover_rate": rate,
            "val_accuracy": {r.id: r.val_accuracy for r in pool.records},
        })
        logger.info(f"[Main] zoo of {len(pool.records)} teachers, cover rate {rate:.3f}")

    def invert(self) -> None:
        pool = self.pool()
        inversion = self.inversion()
        for i, record in enumerate(pool.records):
            task = inversion.recover(record, seed=derive_seed(self.seed, "embed-invert", i), epoch=0)
            save_task(self.out / "tasks" / f"{record.id}.npz", task)
            first, last = task.loss_trace[0], task.loss_trace[-1]
            logger.info(f"[Main] {record.id}: l_ce {first['l_ce']:.4f} -> {last['l_ce']:.4f}")

    def _embedding_service(self) -> EmbeddingService:
        grouping = self.config.grouping
        if grouping.probe_path:
            return EmbeddingService.from_store(Path(grouping.probe_path), grouping)
        store = ModelStore(self.out)
        if PROBE_ID not in store.list_ids():
            ds = self.config.dataset
            record = build_probe(
                self.dataset.image_shape[0], grouping, derive_seed(self.seed, "probe"),
                first_domain=ds.first_domain + ds.num_domains,
            )
            store.save_record(record)
        return EmbeddingService(probe_from_record(store.load_record(PROBE_ID)), grouping)

    def embed(self) -> None:
        pool = self.pool()
        paths = [self.out / "tasks" / f"{rid}.npz" for rid in pool.ids()]
        for path in paths:
            require(path, "invert")
        tasks = [load_task(path) for path in paths]
        embeddings = self._embedding_service().get_embeddings_batch(tasks)
        write_npz(
            self.out / "embeddings.npz",
            ids=np.asarray(pool.ids()),
            fim=np.stack([e.fim_diag for e in embeddings]),
        )
        w = grouping_service.dissimilarity_matrix(embeddings)
        write_matrix_csv(self.out / "W.csv", w)
        batch = np.concatenate([t.images for t in tasks])[:CKA_BATCH]
        write_matrix_csv(self.out / "cka.csv", grouping_service.cka_matrix(pool, batch))

    def group(self) -> None:
        w = read_matrix_csv(require(self.out / "W.csv", "embed"))
        ids = self.pool().ids()
        if w.shape != (len(ids), len(ids)):
            raise ConfigValidationError(f"W.csv is {w.shape} for {len(ids)} teachers; rerun `embed`", stage="embed")
        grouping = self.config.grouping
        groups = grouping_service.group_pool(w, ids, grouping.c, derive_seed(self.seed, "group"), grouping.strategy)
        write_json(self.out / "groups.json", {
            "c": groups.c,
            "strategy": grouping.strategy,
            "ids": ids,
            "group_of": groups.group_of,
            "objective": grouping_service.grouping_objective(w, groups.labels(ids)),
        })

    def train(self) -> None:
        groups = self.groups()
        pool = self.pool()
        meta, diagnostics = meta_service.train(
            pool, groups, self.config.train, self.seed, self.inversion(), checkpoint_dir=self.out / "checkpoints"
        )
        meta_service.save_checkpoint(meta, self.out / "meta")
        meta_service.write_diagnostics(self.out / "diagnostics.csv", diagnostics)
        write_json(self.out / "train_log.json", diagnostics.model_dump(mode="json"))

    def eval(self) -> None:
        require(self.out / "meta" / "manifest.json", "train")
        meta = meta_service.load_checkpoint(self.out / "meta", self.config.train)
        report = evaluation_service.evaluate_with(meta, self.dataset, self.config.eval, self.seed)
        write_json(self.out / "eval.json", report.model_dump(mode="json"))

    def ag(self) -> None:
        pool = self.pool()
        basic = pool.records[0]
        aux_pool = build_overlap_pool(
            self.dataset, basic, self.config.ag.overlaps, self.config.ag.per_bucket,
            self.config.zoo.hyper, derive_seed(self.seed, "aux"),
        )
        ModelStore(self.out / "aux").save_pool(aux_pool)
        rows = evaluation_service.accuracy_gain(
            basic, aux_pool, self.dataset, self.config.ag, self.config.train,
            self.config.eval, self.config.inversion, self.seed,
        )
        write_csv(
            self.out / "ag.csv",
            ["aux_id", "overlap_ratio", "arch", "ag"],
            [(r["aux_id"], f"{r['overlap_ratio']:.4f}", r["arch"], f"{r['ag']:.6f}") for r in rows],
        )
        for ratio, gain in evaluation_service.mean_gain_by_overlap(rows).items():
            logger.info(f"[Main] overlap {ratio:.2f}: mean AG {gain:+.4f}")

    def sweep(self) -> None:
        pool = self.pool()
        w = read_matrix_csv(require(self.out / "W.csv", "embed"))
        args = (self.dataset, self.config.train, self.config.eval, self.config.inversion, self.seed)
        rows = evaluation_service.sweep_pool_sizes(
            pool, w, self.config.sweep.pool_sizes, self.config.grouping.c, *args,
            strategy=self.config.grouping.strategy,
        )
        rows += evaluation_service.sweep_group_counts(
            pool, w, self.config.sweep.group_counts, *args, strategy=self.config.grouping.strategy
        )
        header = ["sweep", "value", "mean_accuracy", "ci95", "cover_rate"]
        write_csv(self.out / "sweep.csv", header, [[r[k] for k in header] for r in rows])

    def ablation(self) -> None:
        groups = self.groups()
        reports = evaluation_service.run_ablation(
            self.pool(), groups, self.dataset, self.config.train, self.config.eval,
            self.config.inversion, self.seed,
        )
        write_json(self.out / "ablation.json", {name: r.model_dump(mode="json") for name, r in reports.items()})

    def plot(self) -> None:
        plot_artifacts(self.out)

    def all(self) -> None:
        for stage in ("zoo-build", "invert", "embed", "group", "train", "eval", "plot"):
            logger.info(f"[Main] stage {stage}")
            self.stages()[stage]()

    def stages(self) -> Dict[str, Callable[[], None]]:
        return {
            "zoo-build": self.zoo_build,
            "invert": self.invert,
            "embed": self.embed,
            "group": self.group,
            "train": self.train,
            "eval": self.eval,
            "ag": self.ag,
            "plot": self.plot,
            "sweep": self.sweep,
            "ablation": self.ablation,
            "all": self.all,
        }


SUBCOMMANDS = ("zoo-build", "invert", "embed", "group", "train", "eval", "ag", "plot", "sweep", "ablation", "all")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tgr",
        description="Data-free meta-learning with task groupings and implicit gradient regularization",
    )
    parser.add_argument("command", choices=SUBCOMMANDS)
    parser.add_argument("--config", type=Path, default=None, help="TOML run config")
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
        help="override one config value (repeatable)",
    )
    parser.add_argument("--output", type=Path, default=None, help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="root seed")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING...")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    raw = apply_overrides(load_raw_config(args.config), args.overrides)
    if args.seed is not None:
        raw["seed"] = args.seed
    output = args.output or os.getenv("TGR_OUTPUT_DIR")
    if output:
        raw["output_dir"] = str(output)
    return RunConfig.model_validate(raw)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = (args.log_level or os.getenv("TGR_LOG_LEVEL", "INFO")).upper()
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)
    torch.use_deterministic_algorithms(True)

    try:
        config = resolve_config(args)
        pipeline = Pipeline(config)
        write_json(pipeline.out / "config.resolved.json", config.model_dump(mode="json"))
        pipeline.stages()[args.command]()
    except ConfigValidationError as e:
        logger.error(f"[Main] {args.command}: {e}")
        return EXIT_VALIDATION
    except (RejectedInputError, ValidationError) as e:
        logger.error(f"[Main] {args.command}: invalid input: {e}")
        return EXIT_VALIDATION
    except NumericFailureError as e:
        logger.error(f"[Main] {args.command}: numeric failure: {e}")
        return EXIT_NUMERIC
    logger.info(f"[Main] {args.command} done; artifacts in {pipeline.out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
