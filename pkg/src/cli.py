"""
Командная строка: aggregate, refine, eval, synth, sweep-tau, batch

Манифест (JSON):
    {
      "passes": ["pass_000.json", ...],
      "intensity": "intensity.json",
      "prediction": "prediction.json",
      "ground_truth": "ground_truth.json",   # необязательно
      "output_dir": "out"
    }
Относительные пути считаются от каталога манифеста.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from pydantic import BaseModel, Field, ValidationError

from .exceptions import ManifestError, RefinementError
from .gcn import save_checkpoint, save_loss_curve
from .graph_builder import dump_graph
from .phantom import PhantomNoise, synth_phantom
from .refiner import (
    DEFAULT_TAUS,
    RefineCase,
    RefineConfig,
    SegmentationRefiner,
    batch_refine,
    relative_improvement,
    sweep_tau,
)
from .uncertainty import PassStack, compute_uncertainty_maps
from .volume import dice, load_volume, require_same_geometry, save_volume
import config

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


class Manifest(BaseModel):
    """Описание входных объемов одного случая"""
    passes: List[Path] = Field(min_length=1)
    intensity: Path
    prediction: Path
    ground_truth: Optional[Path] = None
    output_dir: Path = Path("out")

    @classmethod
    def load(cls, path) -> "Manifest":
        """
        Прочитать манифест и проверить, что все файлы существуют

        Args:
            path: Путь к JSON-файлу манифеста

        Returns:
            Manifest с абсолютными путями
        """
        path = Path(path)
        try:
            with open(path, "r", encoding="utf-8") as f:
                raw = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ManifestError(f"Не удалось прочитать манифест {path}: {e}") from e

        try:
            manifest = cls(**raw)
        except ValidationError as e:
            first = e.errors()[0]
            field = ".".join(str(part) for part in first["loc"])
            raise ManifestError(f"Поле манифеста {field}: {first['msg']}") from e
        return manifest.resolve(path.parent)

    def resolve(self, base: Path) -> "Manifest":
        def absolute(p: Path) -> Path:
            return p if p.is_absolute() else base / p

        resolved = Manifest(
            passes=[absolute(p) for p in self.passes],
            intensity=absolute(self.intensity),
            prediction=absolute(self.prediction),
            ground_truth=absolute(self.ground_truth) if self.ground_truth else None,
            output_dir=absolute(self.output_dir),
        )
        resolved.check_files()
        return resolved

    def check_files(self):
        fields = [("intensity", self.intensity), ("prediction", self.prediction)]
        fields += [(f"passes[{i}]", p) for i, p in enumerate(self.passes)]
        if self.ground_truth is not None:
            fields.append(("ground_truth", self.ground_truth))
        for name, path in fields:
            if not path.is_file():
                raise ManifestError(f"Поле манифеста {name}: файл не найден {path}")


class Inputs:
    """Загруженные объемы манифеста"""

    def __init__(self, manifest: Manifest):
        self.manifest = manifest
        self.intensity = load_volume(manifest.intensity)
        self.prediction = load_volume(manifest.prediction)
        self.passes = PassStack.from_volumes([load_volume(p) for p in manifest.passes])
        self.ground_truth = load_volume(manifest.ground_truth) if manifest.ground_truth else None
        volumes = [self.intensity, self.prediction, self.passes.reference]
        if self.ground_truth is not None:
            volumes.append(self.ground_truth)
        require_same_geometry(*volumes)


def _write_json(data: Dict, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, ensure_ascii=False, sort_keys=True)


def _output_dir(args, manifest: Manifest) -> Path:
    return Path(args.out) if getattr(args, "out", None) else manifest.output_dir


def config_from_args(args) -> RefineConfig:
    """
    Конфигурация: флаги поверх настроек окружения, настройки поверх значений по умолчанию
    """
    base = config.settings.to_refine_config()
    data = base.model_dump()
    overrides = {
        "tau": args.tau,
        "k": args.k,
        "dilation_radius": args.dilate,
        "lambda_": args.lambda_,
        "sigma1": args.sigma1,
        "sigma2": args.sigma2,
        "edge_seed": args.edge_seed,
    }
    data.update({name: value for name, value in overrides.items() if value is not None})
    train_overrides = {"epochs": args.epochs, "learning_rate": args.lr, "init_seed": args.seed}
    data["train"].update({name: value for name, value in train_overrides.items() if value is not None})
    if args.no_lcc:
        data["apply_lcc_to_input"] = False
    if args.uncertain_only:
        data["replace_policy"] = "uncertain-only"
    return RefineConfig(**data)


def cmd_aggregate(args) -> int:
    """Записать ожидание и энтропию"""
    manifest = Manifest.load(args.manifest)
    passes = PassStack.from_volumes([load_volume(p) for p in manifest.passes])
    tau = args.tau if args.tau is not None else RefineConfig().tau
    maps = compute_uncertainty_maps(passes, tau)
    out = _output_dir(args, manifest)
    save_volume(maps.expectation, out / "expectation.json")
    save_volume(maps.entropy, out / "entropy.json")
    logger.info(f"Ожидание и энтропия записаны в {out}")
    return 0


def cmd_refine(args) -> int:
    """Полный конвейер уточнения для одного манифеста"""
    manifest = Manifest.load(args.manifest)
    refine_config = config_from_args(args)
    inputs = Inputs(manifest)
    result = SegmentationRefiner(refine_config).refine(
        inputs.intensity, inputs.passes, inputs.prediction, inputs.ground_truth
    )
    out = _output_dir(args, manifest)
    save_volume(result.prediction, out / "refined.json")
    _write_json(result.report.to_dict(), out / "report.json")

    if args.loss_csv and result.training is not None:
        save_loss_curve(result.training.loss_curve, args.loss_csv)
    if args.checkpoint and result.training is not None:
        save_checkpoint(
            result.training.params,
            args.checkpoint,
            seed=refine_config.train.init_seed,
            epoch=refine_config.train.epochs,
        )
    if args.dump_graph and result.graph is not None:
        dump_graph(result.graph, args.dump_graph)

    logger.info(f"Результат записан в {out} (статус {result.report.status})")
    return 0


def cmd_eval(args) -> int:
    """Вывести Dice двух масок и, при заданном Dice ожидания, rel_imp"""
    a = load_volume(args.a)
    b = load_volume(args.b)
    score = dice(a, b)
    print(f"dice {score:.6f}")
    if args.expectation_dsc is not None:
        print(f"rel_imp {relative_improvement(score, args.expectation_dsc):.6f}")
    return 0


def cmd_synth(args) -> int:
    """Записать фантом: V, GT, Y, T проходов и манифест"""
    noise = PhantomNoise(passes=args.passes, confidence=args.confidence)
    phantom = synth_phantom(args.seed, size=tuple(args.size), noise=noise)
    out = Path(args.out)
    save_volume(phantom.intensity, out / "intensity.json")
    save_volume(phantom.ground_truth, out / "ground_truth.json")
    save_volume(phantom.prediction, out / "prediction.json")
    pass_names = []
    for index, volume in enumerate(phantom.passes.passes):
        name = f"pass_{index:03d}.json"
        save_volume(volume, out / name)
        pass_names.append(name)
    _write_json(
        {
            "passes": pass_names,
            "intensity": "intensity.json",
            "prediction": "prediction.json",
            "ground_truth": "ground_truth.json",
            "output_dir": "out",
        },
        out / MANIFEST_NAME,
    )
    logger.info(f"Фантом записан в {out}: {phantom.to_dict()}")
    return 0


def cmd_sweep_tau(args) -> int:
    """Перебор порогов tau, результат в CSV"""
    manifest = Manifest.load(args.manifest)
    if manifest.ground_truth is None:
        raise ManifestError("Поле манифеста ground_truth: обязательно для sweep-tau")
    refine_config = config_from_args(args)
    inputs = Inputs(manifest)
    taus = args.taus if args.taus else list(DEFAULT_TAUS)
    table = sweep_tau(
        inputs.intensity, inputs.passes, inputs.prediction, inputs.ground_truth, taus, refine_config
    )
    out = _output_dir(args, manifest)
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / "sweep_tau.csv", index=False)
    logger.info(f"Таблица перебора tau записана в {out / 'sweep_tau.csv'}")
    return 0


def cmd_batch(args) -> int:
    """Уточнить несколько манифестов и свести Dice в mean ± std"""
    refine_config = config_from_args(args)
    cases = []
    for path in args.manifests:
        manifest = Manifest.load(path)
        if manifest.ground_truth is None:
            raise ManifestError(f"Поле манифеста ground_truth: обязательно для batch ({path})")
        inputs = Inputs(manifest)
        cases.append(RefineCase(
            name=str(path),
            intensity=inputs.intensity,
            passes=inputs.passes,
            prediction=inputs.prediction,
            ground_truth=inputs.ground_truth,
        ))
    table, summary = batch_refine(cases, refine_config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / "batch.csv", index=False)
    summary["config"] = refine_config.echo()
    _write_json(summary, out / "batch_summary.json")
    for name in ("dice_before", "dice_after", "rel_imp"):
        if name in summary:
            logger.info(f"{name}: {summary[name]['mean']:.4f} ± {summary[name]['std']:.4f}")
    return 0


def _add_refine_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--tau", type=float, help="Порог энтропии (0, 1), по умолчанию 0.8")
    parser.add_argument("--k", type=int, help="Число случайных дальних соседей, по умолчанию 16")
    parser.add_argument("--dilate", type=int, help="Радиус дилатации ROI, по умолчанию 2")
    parser.add_argument("--lambda", dest="lambda_", type=float, help="Вес разнообразия, по умолчанию 1.0")
    parser.add_argument("--sigma1", type=float, help="Масштаб интенсивности, по умолчанию 0.5")
    parser.add_argument("--sigma2", type=float, help="Масштаб расстояния, по умолчанию 100")
    parser.add_argument("--epochs", type=int, help="Эпох обучения, по умолчанию 200")
    parser.add_argument("--lr", type=float, help="Скорость обучения Adam, по умолчанию 0.01")
    parser.add_argument("--seed", type=int, help="Seed инициализации весов")
    parser.add_argument("--edge-seed", type=int, help="Seed выбора дальних ребер")
    parser.add_argument("--no-lcc", action="store_true", help="Не брать наибольшую компоненту Y")
    parser.add_argument("--uncertain-only", action="store_true", help="Заменять только неопределенные воксели")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="segrefine",
        description="Уточнение сегментации органов по неопределенности с помощью GCN",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("aggregate", help="Ожидание и энтропия проходов")
    p.add_argument("manifest")
    p.add_argument("--out")
    p.add_argument("--tau", type=float)
    p.set_defaults(handler=cmd_aggregate)

    p = sub.add_parser("refine", help="Полный конвейер уточнения")
    p.add_argument("manifest")
    p.add_argument("--out")
    _add_refine_flags(p)
    p.add_argument("--loss-csv", help="CSV с кривой потерь")
    p.add_argument("--checkpoint", help="Заголовок чекпоинта весов (.json)")
    p.add_argument("--dump-graph", help="Префикс файлов дампа графа")
    p.set_defaults(handler=cmd_refine)

    p = sub.add_parser("eval", help="Dice двух масок")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--expectation-dsc", type=float)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("synth", help="Синтетический фантом")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, nargs=3, default=[48, 48, 48], metavar=("NX", "NY", "NZ"))
    p.add_argument("--passes", type=int, default=PhantomNoise.passes)
    p.add_argument("--confidence", type=float, default=PhantomNoise.confidence)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("sweep-tau", help="Уточнение при разных tau")
    p.add_argument("manifest")
    p.add_argument("--out")
    p.add_argument("--taus", type=float, nargs="+")
    _add_refine_flags(p)
    p.set_defaults(handler=cmd_sweep_tau)

    p = sub.add_parser("batch", help="Уточнение нескольких случаев со сводкой")
    p.add_argument("manifests", nargs="+")
    p.add_argument("--out", required=True)
    _add_refine_flags(p)
    p.set_defaults(handler=cmd_batch)
    return parser


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    """
    Разобрать аргументы и выполнить подкоманду

    Returns:
        Код возврата: 0 при успехе, 1 при ошибке (ошибки разбора argparse дают 2)
    """
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except RefinementError as e:
        print(f"error: {type(e).__name__}: {_one_line(e)}", file=sys.stderr)
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(part) for part in first["loc"])
        print(f"error: ValidationError: {field}: {_one_line(first['msg'])}", file=sys.stderr)
    except ValueError as e:
        print(f"error: ValueError: {_one_line(e)}", file=sys.stderr)
    except Exception as e:
        logger.error(f"Непредвиденная ошибка: {e}", exc_info=True)
        print(f"error: {type(e).__name__}: {_one_line(e)}", file=sys.stderr)
    return 1


def _one_line(message) -> str:
    return " ".join(str(message).split())
