"""
Оркестрация уточнения сегментации: конвейер, метрики и эксперименты
"""
import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from .exceptions import VolumeError
from .gcn import TrainConfig, TrainResult, predict, train
from .graph_builder import VoxelGraph, build_graph, build_roi
from .uncertainty import PassStack, UncertaintyMaps, compute_uncertainty_maps, with_tau
from .volume import (
    Volume3,
    VolumeKind,
    dice,
    largest_connected_component,
    require_same_geometry,
    threshold,
)

logger = logging.getLogger(__name__)

# Набор порогов из эксперимента с разными tau
DEFAULT_TAUS = (0.001, 0.3, 0.5, 0.8, 0.999)
SWEEP_COLUMNS = ["tau", "dice_before", "dice_after", "uncertain_voxels", "node_count"]

STATUS_REFINED = "refined"
STATUS_EMPTY_ROI = "empty-roi"


class RefineConfig(BaseModel):
    """Все настраиваемые параметры уточнения"""
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    tau: float = Field(0.8, gt=0, lt=1)
    k: int = Field(16, ge=0)
    dilation_radius: int = Field(2, ge=1)
    lambda_: float = Field(1.0, ge=0, alias="lambda")
    sigma1: float = Field(0.5, gt=0)
    sigma2: float = Field(100.0, gt=0)
    train: TrainConfig = Field(default_factory=TrainConfig)
    edge_seed: int = 0
    apply_lcc_to_input: bool = True
    replace_policy: Literal["full", "uncertain-only"] = "full"

    def echo(self) -> Dict:
        """Конфигурация для отчета"""
        return self.model_dump(mode="json", by_alias=True)

    def with_tau(self, tau: float) -> "RefineConfig":
        """Копия с другим порогом (с валидацией)"""
        data = self.model_dump()
        data["tau"] = tau
        return RefineConfig(**data)


@dataclass
class RefineReport:
    """Отчет об одном запуске уточнения"""
    status: str
    node_count: int = 0
    labeled_count: int = 0
    unlabeled_count: int = 0
    edge_count: int = 0
    uncertain_voxels: int = 0
    roi_voxels: int = 0
    changed_voxels: int = 0
    loss_curve: List[float] = field(default_factory=list)
    final_loss: Optional[float] = None
    config: Dict = field(default_factory=dict)
    seeds: Dict = field(default_factory=dict)
    dice_before: Optional[float] = None
    dice_after: Optional[float] = None
    dice_expectation: Optional[float] = None
    rel_imp: Optional[float] = None
    warnings: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict:
        """Преобразовать в словарь; метрики без GT отсутствуют, а не равны нулю"""
        data = {
            "status": self.status,
            "node_count": self.node_count,
            "labeled_count": self.labeled_count,
            "unlabeled_count": self.unlabeled_count,
            "edge_count": self.edge_count,
            "uncertain_voxels": self.uncertain_voxels,
            "roi_voxels": self.roi_voxels,
            "changed_voxels": self.changed_voxels,
            "loss_curve": self.loss_curve,
            "final_loss": self.final_loss,
            "config": self.config,
            "seeds": self.seeds,
            "warnings": self.warnings,
        }
        for name in ("dice_before", "dice_after", "dice_expectation", "rel_imp"):
            value = getattr(self, name)
            if value is not None:
                data[name] = value
        return data


@dataclass(eq=False)
class RefineResult:
    """Уточненная маска, отчет и промежуточные артефакты"""
    prediction: Volume3
    report: RefineReport
    maps: UncertaintyMaps
    graph: Optional[VoxelGraph] = None
    training: Optional[TrainResult] = None


def relative_improvement(gcn_dsc: float, expectation_dsc: float) -> float:
    """
    Относительное улучшение Dice GCN над бинаризованным ожиданием, в процентах

    Args:
        gcn_dsc: Dice уточненной сегментации
        expectation_dsc: Dice ожидания, бинаризованного по 0.5

    Returns:
        (gcn - expectation) / expectation * 100
    """
    if expectation_dsc <= 0:
        raise ValueError(f"Dice ожидания должен быть > 0, получено {expectation_dsc}")
    return (gcn_dsc - expectation_dsc) / expectation_dsc * 100.0


class SegmentationRefiner:
    """Уточнение бинарной сегментации по неопределенности стохастических проходов"""

    def __init__(self, config: Optional[RefineConfig] = None):
        """
        Инициализация

        Args:
            config: Параметры уточнения (по умолчанию стандартные значения)
        """
        self.config = config or RefineConfig()

    def refine(
        self,
        intensity: Volume3,
        passes: PassStack,
        prediction: Volume3,
        ground_truth: Optional[Volume3] = None,
    ) -> RefineResult:
        """
        Полный конвейер: ожидание → энтропия → маска неопределенности → ROI → граф → GCN → Y*

        Args:
            intensity: Объем интенсивности V
            passes: Стохастические проходы
            prediction: Предсказание Y
            ground_truth: Разметка для метрик (необязательна)

        Returns:
            RefineResult
        """
        maps = compute_uncertainty_maps(passes, self.config.tau)
        return self.refine_with_maps(intensity, maps, prediction, ground_truth)

    def refine_with_maps(
        self,
        intensity: Volume3,
        maps: UncertaintyMaps,
        prediction: Volume3,
        ground_truth: Optional[Volume3] = None,
    ) -> RefineResult:
        """Уточнение по уже посчитанным картам неопределенности"""
        config = self.config
        started = time.perf_counter()
        if prediction.kind is not VolumeKind.MASK:
            raise VolumeError(f"Предсказание должно быть маской, получено {prediction.kind.value}")
        require_same_geometry(intensity, prediction, maps.expectation)
        if ground_truth is not None:
            require_same_geometry(prediction, ground_truth)

        working = largest_connected_component(prediction) if config.apply_lcc_to_input else prediction
        roi = build_roi(maps.uncertain_mask, maps.expectation, config.dilation_radius)
        report = RefineReport(
            status=STATUS_REFINED,
            uncertain_voxels=maps.uncertain_mask.count(),
            roi_voxels=roi.count(),
            config=config.echo(),
            seeds={"edge_seed": config.edge_seed, "init_seed": config.train.init_seed},
        )

        if report.roi_voxels == 0:
            message = "Пустая ROI: нет неопределенных вокселей и ожидание пусто, Y возвращается без изменений"
            logger.warning(message)
            report.status = STATUS_EMPTY_ROI
            report.warnings.append(message)
            self._add_metrics(report, working, working, maps, ground_truth)
            return RefineResult(prediction=working, report=report, maps=maps)

        graph = build_graph(
            intensity,
            working,
            maps,
            k=config.k,
            dilation_radius=config.dilation_radius,
            lambda_=config.lambda_,
            sigma1=config.sigma1,
            sigma2=config.sigma2,
            edge_seed=config.edge_seed,
            roi=roi,
        )
        training = train(graph, config.train)
        node_labels = predict(graph, training.params)

        refined = working.data.copy()
        flat_index = graph.nodes.flat_index
        if config.replace_policy == "full":
            refined[flat_index] = node_labels
        else:
            unlabeled = ~graph.labeled_mask
            refined[flat_index[unlabeled]] = node_labels[unlabeled]
        refined_volume = working.like(refined, VolumeKind.MASK)

        report.node_count = graph.node_count
        report.labeled_count = graph.labeled_count
        report.unlabeled_count = graph.unlabeled_count
        report.edge_count = graph.edge_count
        report.changed_voxels = int(np.count_nonzero(refined != working.data))
        report.loss_curve = list(training.loss_curve)
        report.final_loss = training.final_loss
        if np.unique(graph.labels[graph.labeled_mask]).size == 1:
            report.warnings.append("Размеченные узлы содержат только один класс")
        self._add_metrics(report, working, refined_volume, maps, ground_truth)

        logger.info(
            f"Уточнение завершено за {time.perf_counter() - started:.2f} с: "
            f"узлов {report.node_count}, изменено вокселей {report.changed_voxels}"
        )
        return RefineResult(
            prediction=refined_volume,
            report=report,
            maps=maps,
            graph=graph,
            training=training,
        )

    @staticmethod
    def _add_metrics(
        report: RefineReport,
        before: Volume3,
        after: Volume3,
        maps: UncertaintyMaps,
        ground_truth: Optional[Volume3],
    ):
        if ground_truth is None:
            return
        report.dice_before = dice(before, ground_truth)
        report.dice_after = dice(after, ground_truth)
        report.dice_expectation = dice(threshold(maps.expectation, 0.5), ground_truth)
        if report.dice_expectation > 0:
            report.rel_imp = relative_improvement(report.dice_after, report.dice_expectation)
        else:
            message = "Dice ожидания равен 0, относительное улучшение не определено"
            logger.warning(message)
            report.warnings.append(message)
        logger.info(
            f"Dice: до {report.dice_before:.4f}, после {report.dice_after:.4f}, "
            f"ожидание {report.dice_expectation:.4f}"
        )


def refine(
    intensity: Volume3,
    passes: PassStack,
    prediction: Volume3,
    config: Optional[RefineConfig] = None,
    ground_truth: Optional[Volume3] = None,
) -> Tuple[Volume3, RefineReport]:
    """
    Уточнить сегментацию

    Returns:
        Кортеж (Y*, отчет)
    """
    result = SegmentationRefiner(config).refine(intensity, passes, prediction, ground_truth)
    return result.prediction, result.report


def sweep_tau(
    intensity: Volume3,
    passes: PassStack,
    prediction: Volume3,
    ground_truth: Volume3,
    taus: Sequence[float],
    config: Optional[RefineConfig] = None,
) -> pd.DataFrame:
    """
    Уточнение при разных порогах неопределенности

    Ожидание и энтропия считаются один раз; seeds общие для всех порогов.

    Returns:
        Таблица с колонками tau, dice_before, dice_after, uncertain_voxels, node_count
    """
    if ground_truth is None:
        raise ValueError("Для перебора tau нужна разметка (ground truth)")
    taus = list(taus)
    if not taus:
        raise ValueError("Список порогов tau пуст")
    config = config or RefineConfig()
    configs = [config.with_tau(tau) for tau in taus]

    base_maps = compute_uncertainty_maps(passes, configs[0].tau)
    rows = []
    for tau_config in configs:
        maps = with_tau(base_maps, tau_config.tau)
        result = SegmentationRefiner(tau_config).refine_with_maps(intensity, maps, prediction, ground_truth)
        rows.append({
            "tau": tau_config.tau,
            "dice_before": result.report.dice_before,
            "dice_after": result.report.dice_after,
            "uncertain_voxels": result.report.uncertain_voxels,
            "node_count": result.report.node_count,
        })
        logger.info(f"tau={tau_config.tau}: Dice {result.report.dice_before:.4f} -> {result.report.dice_after:.4f}")
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)


@dataclass(eq=False)
class RefineCase:
    """Один входной объем для пакетного уточнения"""
    name: str
    intensity: Volume3
    passes: PassStack
    prediction: Volume3
    ground_truth: Volume3


def batch_refine(
    cases: Sequence[RefineCase],
    config: Optional[RefineConfig] = None,
) -> Tuple[pd.DataFrame, Dict]:
    """
    Уточнить каждый объем отдельно и свести метрики в mean ± std

    Returns:
        Кортеж (таблица по объемам, сводка)
    """
    if not cases:
        raise ValueError("Нет объемов для пакетного уточнения")
    refiner = SegmentationRefiner(config)
    rows = []
    for case in cases:
        logger.info(f"Уточнение объема {case.name}")
        result = refiner.refine(case.intensity, case.passes, case.prediction, case.ground_truth)
        report = result.report
        rows.append({
            "case": case.name,
            "status": report.status,
            "dice_before": report.dice_before,
            "dice_after": report.dice_after,
            "dice_expectation": report.dice_expectation,
            "rel_imp": report.rel_imp,
            "node_count": report.node_count,
        })
    table = pd.DataFrame(rows)
    summary = {}
    for column in ("dice_before", "dice_after", "dice_expectation", "rel_imp"):
        values = table[column].dropna().astype(float)
        if values.empty:
            continue
        summary[column] = {
            "mean": float(values.mean()),
            "std": float(values.std(ddof=0)),
            "count": int(values.size),
        }
    summary["cases"] = len(cases)
    return table, summary
