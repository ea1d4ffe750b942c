"""
Построение частично размеченного разреженного графа вокселей
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
import scipy.sparse as sp

from .exceptions import GraphError
from .uncertainty import UncertaintyMaps
from .volume import Volume3, VolumeKind, dilate, require_same_geometry, threshold

logger = logging.getLogger(__name__)

UNLABELED = -1
BACKGROUND = 0
FOREGROUND = 1

DIVERSITY_EPS = 1e-6
EXPECTATION_CUT = 0.5
SELF_LOOP_WEIGHT = 1.0

# Признаки узла: стандартизованная интенсивность, ожидание, энтропия
FEATURE_NAMES = ("intensity", "expectation", "entropy")


@dataclass(frozen=True)
class NodeRecord:
    """Узел графа: воксель, признаки и метка"""
    voxel: Tuple[int, int, int]
    feature: Tuple[float, float, float]
    label: Optional[int]

    @property
    def is_labeled(self) -> bool:
        return self.label is not None

    def to_dict(self) -> Dict:
        """Преобразовать в словарь"""
        return {
            "voxel": list(self.voxel),
            "intensity": self.feature[0],
            "expectation": self.feature[1],
            "entropy": self.feature[2],
            "label": self.label,
        }


@dataclass(frozen=True, eq=False)
class NodeTable:
    """Узлы ROI в порядке обхода объема (x быстрее всего)"""
    dims: Tuple[int, int, int]
    flat_index: np.ndarray
    coords: np.ndarray
    features: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return int(self.flat_index.size)

    @property
    def labeled_mask(self) -> np.ndarray:
        return self.labels != UNLABELED

    def record(self, index: int) -> NodeRecord:
        """Узел с номером index в виде NodeRecord"""
        label = int(self.labels[index])
        return NodeRecord(
            voxel=tuple(int(c) for c in self.coords[index]),
            feature=tuple(float(f) for f in self.features[index]),
            label=None if label == UNLABELED else label,
        )

    def records(self) -> Iterator[NodeRecord]:
        for index in range(len(self)):
            yield self.record(index)


@dataclass(frozen=True, eq=False)
class EdgeList:
    """Неориентированные ребра (i < j), отсортированные лексикографически"""
    rows: np.ndarray
    cols: np.ndarray

    def __len__(self) -> int:
        return int(self.rows.size)


@dataclass(eq=False)
class VoxelGraph:
    """Граф вокселей ROI с весами и нормированной смежностью"""
    nodes: NodeTable
    adjacency: sp.csr_matrix
    norm_adj: sp.csr_matrix
    voxel_to_node: np.ndarray

    @classmethod
    def from_edges(
        cls,
        features: np.ndarray,
        labels: np.ndarray,
        rows: np.ndarray,
        cols: np.ndarray,
        weights: np.ndarray,
        coords: Optional[np.ndarray] = None,
    ) -> "VoxelGraph":
        """
        Собрать граф из готовых массивов (для игрушечных графов и тестов)

        Args:
            features: Матрица признаков (n, 3)
            labels: Метки узлов, -1 для неразмеченных
            rows: Начала ребер
            cols: Концы ребер
            weights: Веса ребер (>= 0)
            coords: Координаты узлов (n, 3); по умолчанию (i, 0, 0)

        Returns:
            VoxelGraph
        """
        features = np.asarray(features, dtype=np.float64)
        n = features.shape[0]
        if coords is None:
            coords = np.column_stack([np.arange(n), np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.int64)])
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        if (rows == cols).any():
            raise GraphError("Петли не допускаются в списке ребер")
        low = np.minimum(rows, cols)
        high = np.maximum(rows, cols)
        nodes = NodeTable(
            dims=(n, 1, 1),
            flat_index=np.arange(n, dtype=np.int64),
            coords=np.asarray(coords, dtype=np.int64),
            features=features,
            labels=np.asarray(labels, dtype=np.int64),
        )
        adjacency = adjacency_from_edges(n, EdgeList(rows=low, cols=high), np.asarray(weights, dtype=np.float64))
        return cls(
            nodes=nodes,
            adjacency=adjacency,
            norm_adj=normalize_adjacency(adjacency),
            voxel_to_node=np.arange(n, dtype=np.int64),
        )

    @property
    def node_count(self) -> int:
        return len(self.nodes)

    @property
    def features(self) -> np.ndarray:
        return self.nodes.features

    @property
    def labels(self) -> np.ndarray:
        return self.nodes.labels

    @property
    def labeled_mask(self) -> np.ndarray:
        return self.nodes.labeled_mask

    @property
    def labeled_count(self) -> int:
        return int(np.count_nonzero(self.labeled_mask))

    @property
    def unlabeled_count(self) -> int:
        return self.node_count - self.labeled_count

    @property
    def edge_count(self) -> int:
        return int(self.adjacency.nnz // 2)

    def node(self, index: int) -> NodeRecord:
        return self.nodes.record(index)

    def node_index(self, ix: int, iy: int, iz: int) -> Optional[int]:
        """Номер узла для вокселя (ix, iy, iz) или None вне ROI"""
        nx, ny, nz = self.nodes.dims
        if not (0 <= ix < nx and 0 <= iy < ny and 0 <= iz < nz):
            return None
        index = int(self.voxel_to_node[ix + nx * (iy + ny * iz)])
        return None if index < 0 else index

    def to_dict(self) -> Dict:
        """Сводка для отчета"""
        return {
            "node_count": self.node_count,
            "labeled_count": self.labeled_count,
            "unlabeled_count": self.unlabeled_count,
            "edge_count": self.edge_count,
        }


def build_roi(uncertain: Volume3, expectation: Volume3, dilation_radius: int) -> Volume3:
    """
    ROI: расширенная маска неопределенности плюс ожидание, бинаризованное по 0.5

    Args:
        uncertain: Маска неопределенных вокселей
        expectation: Объем ожидания
        dilation_radius: Радиус дилатации

    Returns:
        Маска ROI
    """
    require_same_geometry(uncertain, expectation)
    dilated = dilate(uncertain, dilation_radius)
    expected_fg = threshold(expectation, EXPECTATION_CUT)
    roi = np.maximum(dilated.data, expected_fg.data)
    return uncertain.like(roi, VolumeKind.MASK)


def _flat_to_coords(flat_index: np.ndarray, dims: Tuple[int, int, int]) -> np.ndarray:
    nx, ny, _ = dims
    ix = flat_index % nx
    iy = (flat_index // nx) % ny
    iz = flat_index // (nx * ny)
    return np.column_stack([ix, iy, iz]).astype(np.int64)


def build_nodes(
    roi: Volume3,
    intensity: Volume3,
    expectation: Volume3,
    entropy: Volume3,
    prediction: Volume3,
    uncertain: Volume3,
) -> NodeTable:
    """
    Создать по узлу на каждый воксель ROI

    Интенсивность стандартизуется (z-score) по вокселям ROI. Метка узла равна
    предсказанию Y, если воксель уверенный, иначе узел неразмечен.

    Args:
        roi: Маска ROI
        intensity: Объем интенсивности V
        expectation: Объем ожидания
        entropy: Объем энтропии
        prediction: Предсказание Y
        uncertain: Маска неопределенных вокселей

    Returns:
        Таблица узлов
    """
    require_same_geometry(roi, intensity, expectation, entropy, prediction, uncertain)
    flat_index = np.flatnonzero(roi.data > 0.5).astype(np.int64)
    if flat_index.size == 0:
        raise GraphError("Пустая ROI: нет вокселей для построения графа")

    raw_intensity = intensity.data[flat_index]
    mean = float(raw_intensity.mean())
    std = float(raw_intensity.std())
    if not np.isfinite(std) or std <= 0.0:
        std = 1.0
    features = np.column_stack([
        (raw_intensity - mean) / std,
        expectation.data[flat_index],
        entropy.data[flat_index],
    ])
    if not np.isfinite(features).all():
        raise GraphError("Признаки узлов содержат нечисловые значения")

    is_uncertain = uncertain.data[flat_index] > 0.5
    labels = np.where(is_uncertain, UNLABELED, (prediction.data[flat_index] > 0.5).astype(np.int64))
    labels = labels.astype(np.int64)

    labeled = labels[labels != UNLABELED]
    if labeled.size == 0:
        raise GraphError("В графе нет размеченных узлов: все воксели ROI неопределенные")
    if np.unique(labeled).size == 1:
        logger.warning(
            f"Размеченные узлы содержат только класс {int(labeled[0])}; обучение продолжится"
        )

    logger.debug(
        f"Узлы графа: {flat_index.size}, размеченных {labeled.size}, "
        f"интенсивность mean={mean:.4f} std={std:.4f}"
    )
    return NodeTable(
        dims=roi.dims,
        flat_index=flat_index,
        coords=_flat_to_coords(flat_index, roi.dims),
        features=features,
        labels=labels,
    )


def _voxel_to_node(nodes: NodeTable) -> np.ndarray:
    nx, ny, nz = nodes.dims
    lookup = np.full(nx * ny * nz, -1, dtype=np.int64)
    lookup[nodes.flat_index] = np.arange(len(nodes), dtype=np.int64)
    return lookup


def _face_pairs(nodes: NodeTable, lookup: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Пары соседей по грани внутри ROI (i < j)"""
    nx, ny, nz = nodes.dims
    coords = nodes.coords
    rows: List[np.ndarray] = []
    cols: List[np.ndarray] = []
    for axis, (size, stride) in enumerate(((nx, 1), (ny, nx), (nz, nx * ny))):
        inside = coords[:, axis] + 1 < size
        source = np.flatnonzero(inside)
        target = lookup[nodes.flat_index[source] + stride]
        found = target >= 0
        rows.append(source[found])
        cols.append(target[found])
    return np.concatenate(rows), np.concatenate(cols)


def build_edges(nodes: NodeTable, roi: Volume3, k: int, seed: int) -> EdgeList:
    """
    Ребра графа: соседи по грани внутри ROI плюс k случайных дальних связей

    Для каждого узла по порядку номеров выбирается min(k, доступно) узлов
    равномерно без возвращения, исключая сам узел и его текущих соседей.
    Генератор с фиксированным seed расходуется пачками по m индексов.

    Args:
        nodes: Таблица узлов
        roi: Маска ROI, по которой построены узлы
        k: Число случайных связей на узел
        seed: Seed генератора

    Returns:
        Список неориентированных ребер
    """
    n = len(nodes)
    if n == 0:
        raise GraphError("Нельзя строить ребра для пустого графа")
    if roi.count() != n:
        raise GraphError(f"ROI содержит {roi.count()} вокселей, а узлов {n}")
    if k < 0:
        raise ValueError(f"k должно быть >= 0, получено {k}")
    if k >= n:
        logger.warning(f"k={k} >= числа узлов {n}; k ограничено до {n - 1}")
        k = n - 1

    lookup = _voxel_to_node(nodes)
    face_rows, face_cols = _face_pairs(nodes, lookup)

    random_rows: List[int] = []
    random_cols: List[int] = []
    if k > 0:
        neighbours = [set() for _ in range(n)]
        for i, j in zip(face_rows.tolist(), face_cols.tolist()):
            neighbours[i].add(j)
            neighbours[j].add(i)

        rng = np.random.default_rng(seed)
        for i in range(n):
            current = neighbours[i]
            m = min(k, n - 1 - len(current))
            if m <= 0:
                continue
            chosen: List[int] = []
            chosen_set = set()
            while len(chosen) < m:
                for candidate in rng.integers(0, n, size=m).tolist():
                    if candidate == i or candidate in current or candidate in chosen_set:
                        continue
                    chosen.append(candidate)
                    chosen_set.add(candidate)
                    if len(chosen) == m:
                        break
            for j in chosen:
                current.add(j)
                neighbours[j].add(i)
                random_rows.append(min(i, j))
                random_cols.append(max(i, j))

    rows = np.concatenate([face_rows, np.asarray(random_rows, dtype=np.int64)])
    cols = np.concatenate([face_cols, np.asarray(random_cols, dtype=np.int64)])
    keys = np.unique(rows * n + cols)
    edges = EdgeList(rows=keys // n, cols=keys % n)
    logger.debug(f"Ребра: по грани {face_rows.size}, случайных {len(random_rows)}, всего {len(edges)}")
    return edges


def diversity(p_i, p_j):
    """
    Симметричная KL-подобная дивергенция бинарных распределений (p, 1-p), log2

    Вероятности предварительно ограничиваются [1e-6, 1 - 1e-6].
    Работает как со скалярами, так и с массивами.
    """
    a = np.clip(np.asarray(p_i, dtype=np.float64), DIVERSITY_EPS, 1.0 - DIVERSITY_EPS)
    b = np.clip(np.asarray(p_j, dtype=np.float64), DIVERSITY_EPS, 1.0 - DIVERSITY_EPS)
    # Упорядочивание аргументов делает результат побитово симметричным
    p = np.maximum(a, b)
    q = np.minimum(a, b)
    value = (p - q) * np.log2(p / q) + ((1.0 - p) - (1.0 - q)) * np.log2((1.0 - p) / (1.0 - q))
    value = np.maximum(value, 0.0)
    if value.ndim == 0:
        return float(value)
    return value


def _check_sigmas(sigma1: float, sigma2: float):
    if sigma1 <= 0 or sigma2 <= 0:
        raise ValueError(f"sigma1 и sigma2 должны быть > 0, получено {sigma1}, {sigma2}")


def _weights(
    expectation_i, expectation_j,
    intensity_i, intensity_j,
    squared_distance,
    lambda_: float, sigma1: float, sigma2: float,
):
    intensity_term = np.exp(-np.square(intensity_i - intensity_j) / (2.0 * sigma1))
    spatial_term = np.exp(-squared_distance / (2.0 * sigma2))
    return lambda_ * diversity(expectation_i, expectation_j) + intensity_term + spatial_term


def edge_weight(
    node_i: NodeRecord,
    node_j: NodeRecord,
    lambda_: float,
    sigma1: float,
    sigma2: float,
) -> float:
    """
    Вес ребра: λ·div(E_i, E_j) + exp(-ΔV²/2σ1) + exp(-‖Δx‖²/2σ2)

    Args:
        node_i: Первый узел
        node_j: Второй узел
        lambda_: Балансирующий множитель дивергенции
        sigma1: Ширина ядра по интенсивности
        sigma2: Ширина пространственного ядра (в вокселях²)

    Returns:
        Неотрицательный вес
    """
    _check_sigmas(sigma1, sigma2)
    delta = np.subtract(node_i.voxel, node_j.voxel, dtype=np.float64)
    value = _weights(
        node_i.feature[1], node_j.feature[1],
        node_i.feature[0], node_j.feature[0],
        float(np.dot(delta, delta)),
        lambda_, sigma1, sigma2,
    )
    return float(value)


def edge_weights(
    nodes: NodeTable,
    edges: EdgeList,
    lambda_: float,
    sigma1: float,
    sigma2: float,
) -> np.ndarray:
    """Веса для всех ребер сразу (та же формула, что и edge_weight)"""
    _check_sigmas(sigma1, sigma2)
    features = nodes.features
    delta = (nodes.coords[edges.rows] - nodes.coords[edges.cols]).astype(np.float64)
    return np.asarray(_weights(
        features[edges.rows, 1], features[edges.cols, 1],
        features[edges.rows, 0], features[edges.cols, 0],
        np.einsum("ij,ij->i", delta, delta),
        lambda_, sigma1, sigma2,
    ), dtype=np.float64)


def adjacency_from_edges(n: int, edges: EdgeList, weights: np.ndarray) -> sp.csr_matrix:
    """Симметричная взвешенная матрица смежности без петель"""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(edges),):
        raise GraphError(f"Число весов {weights.shape} не совпадает с числом ребер {len(edges)}")
    if (weights < 0).any() or not np.isfinite(weights).all():
        raise GraphError("Веса ребер должны быть конечными и неотрицательными")
    rows = np.concatenate([edges.rows, edges.cols])
    cols = np.concatenate([edges.cols, edges.rows])
    data = np.concatenate([weights, weights])
    adjacency = sp.csr_matrix((data, (rows, cols)), shape=(n, n))
    adjacency.sort_indices()
    return adjacency


def normalize_adjacency(adjacency: sp.spmatrix) -> sp.csr_matrix:
    """
    Нормированная смежность с петлями: D̃^{-1/2} (A + I) D̃^{-1/2}

    Args:
        adjacency: Симметричная взвешенная смежность без петель

    Returns:
        Симметричная CSR-матрица с неотрицательными элементами
    """
    adjacency = sp.csr_matrix(adjacency, dtype=np.float64)
    n = adjacency.shape[0]
    if adjacency.shape != (n, n):
        raise GraphError(f"Матрица смежности должна быть квадратной: {adjacency.shape}")
    if np.any(adjacency.diagonal() != 0):
        raise GraphError("Матрица смежности не должна содержать петель")
    if adjacency.nnz and adjacency.data.min() < 0:
        raise GraphError("Матрица смежности содержит отрицательные веса")

    with_loops = (adjacency + SELF_LOOP_WEIGHT * sp.identity(n, format="csr")).tocoo()
    degree = np.asarray(with_loops.sum(axis=1)).ravel()
    inv_sqrt = 1.0 / np.sqrt(degree)
    # Произведение масштабов коммутативно, поэтому результат точно симметричен
    scale = inv_sqrt[with_loops.row] * inv_sqrt[with_loops.col]
    normalized = sp.csr_matrix(
        (with_loops.data * scale, (with_loops.row, with_loops.col)),
        shape=(n, n),
    )
    normalized.sort_indices()
    return normalized


def build_graph(
    intensity: Volume3,
    prediction: Volume3,
    maps: UncertaintyMaps,
    *,
    k: int,
    dilation_radius: int,
    lambda_: float,
    sigma1: float,
    sigma2: float,
    edge_seed: int,
    roi: Optional[Volume3] = None,
) -> VoxelGraph:
    """
    Полное построение графа по ожиданию, энтропии, интенсивности и предсказанию

    Args:
        intensity: Объем интенсивности V
        prediction: Предсказание Y
        maps: Результат анализа неопределенности
        k: Число случайных дальних связей на узел
        dilation_radius: Радиус дилатации маски неопределенности
        lambda_: Вес дивергенции
        sigma1: Ширина ядра интенсивности
        sigma2: Ширина пространственного ядра
        edge_seed: Seed случайных связей
        roi: Готовая ROI (если уже посчитана)

    Returns:
        VoxelGraph
    """
    if roi is None:
        roi = build_roi(maps.uncertain_mask, maps.expectation, dilation_radius)
    nodes = build_nodes(roi, intensity, maps.expectation, maps.entropy, prediction, maps.uncertain_mask)
    edges = build_edges(nodes, roi, k, edge_seed)
    weights = edge_weights(nodes, edges, lambda_, sigma1, sigma2)
    adjacency = adjacency_from_edges(len(nodes), edges, weights)
    graph = VoxelGraph(
        nodes=nodes,
        adjacency=adjacency,
        norm_adj=normalize_adjacency(adjacency),
        voxel_to_node=_voxel_to_node(nodes),
    )
    logger.info(
        f"Граф построен: узлов {graph.node_count}, размеченных {graph.labeled_count}, "
        f"ребер {graph.edge_count}"
    )
    return graph


def dump_graph(graph: VoxelGraph, prefix: Union[str, Path]) -> Tuple[Path, Path]:
    """
    Отладочный дамп графа в текстовые файлы

    <prefix>_edges.txt: "node_i node_j weight" (i < j)
    <prefix>_nodes.txt: "index ix iy iz intensity expectation entropy label",
    метка -1 означает неразмеченный узел.

    Returns:
        Пути к файлам ребер и узлов
    """
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    upper = sp.triu(graph.adjacency, k=1).tocoo()
    order = np.lexsort((upper.col, upper.row))
    edges = pd.DataFrame({
        "node_i": upper.row[order],
        "node_j": upper.col[order],
        "weight": upper.data[order],
    })
    nodes = graph.nodes
    table = pd.DataFrame({
        "index": np.arange(len(nodes)),
        "ix": nodes.coords[:, 0],
        "iy": nodes.coords[:, 1],
        "iz": nodes.coords[:, 2],
        "intensity": nodes.features[:, 0],
        "expectation": nodes.features[:, 1],
        "entropy": nodes.features[:, 2],
        "label": nodes.labels,
    })
    edges_path = prefix.with_name(prefix.name + "_edges.txt")
    nodes_path = prefix.with_name(prefix.name + "_nodes.txt")
    edges.to_csv(edges_path, sep=" ", header=False, index=False, float_format="%.9g")
    table.to_csv(nodes_path, sep=" ", header=False, index=False, float_format="%.9g")
    logger.info(f"Граф выгружен: {edges_path}, {nodes_path}")
    return edges_path, nodes_path
