"""
Тесты для модуля graph_builder: ROI, узлы, ребра, веса, нормировка
"""
import sys
import tempfile
from pathlib import Path

# Добавляем корневую директорию проекта в путь
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

import logging
import math

import numpy as np

from src.exceptions import GraphError
from src.graph_builder import (
    UNLABELED,
    NodeRecord,
    VoxelGraph,
    build_edges,
    build_graph,
    build_nodes,
    build_roi,
    diversity,
    dump_graph,
    edge_weight,
)
from src.uncertainty import UncertaintyMaps, entropy_map, uncertain_mask
from src.volume import Volume3, VolumeKind
from tests.runner import run_tests

# Настройка логирования для тестов
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)

logger = logging.getLogger(__name__)

TAU = 0.8
EXPECTATION_LEVELS = np.array([0.0, 0.05, 0.5, 0.95, 1.0])


def _case(seed: int, shape=(3, 4, 4)):
    """Небольшой объем: ожидание из фиксированных уровней, 0.5 неопределенно"""
    rng = np.random.default_rng(seed)
    expectation = Volume3.from_array(rng.choice(EXPECTATION_LEVELS, size=shape), VolumeKind.PROBABILITY)
    entropy = entropy_map(expectation)
    maps = UncertaintyMaps(
        expectation=expectation,
        entropy=entropy,
        uncertain_mask=uncertain_mask(entropy, TAU),
        tau=TAU,
    )
    intensity = Volume3.from_array(rng.normal(100.0, 20.0, size=shape), VolumeKind.INTENSITY)
    prediction = Volume3.from_array((rng.random(shape) < 0.5).astype(np.float64), VolumeKind.MASK)
    return intensity, prediction, maps


def _dense_normalized(adjacency: np.ndarray) -> np.ndarray:
    with_loops = adjacency + np.eye(adjacency.shape[0])
    degree = with_loops.sum(axis=1)
    scale = np.diag(1.0 / np.sqrt(degree))
    return scale @ with_loops @ scale


def test_diversity_closed_form():
    """Тест дивергенции: ноль на диагонали, известное значение, симметрия"""
    logger.info("Тест 1: Дивергенция")
    for p in (0.0, 0.2, 0.5, 0.99, 1.0):
        assert diversity(p, p) == 0.0
    expected = 1.6 * math.log2(9.0)
    assert abs(diversity(0.9, 0.1) - expected) < 1e-12
    assert abs(diversity(0.9, 0.1) - 5.07188) < 1e-4
    assert diversity(0.3, 0.7) == diversity(0.7, 0.3)
    # Ограничение 1e-6 делает значение конечным
    assert math.isfinite(diversity(0.0, 1.0))
    logger.info(f"✓ div(0.9, 0.1) = {diversity(0.9, 0.1):.5f}")


def test_edge_weight_symmetry():
    """Тест симметрии веса на 1000 случайных парах"""
    logger.info("Тест 2: Симметрия веса ребра")
    rng = np.random.default_rng(21)
    for _ in range(1000):
        a = NodeRecord(
            voxel=tuple(int(c) for c in rng.integers(0, 40, size=3)),
            feature=(float(rng.normal()), float(rng.random()), float(rng.random())),
            label=None,
        )
        b = NodeRecord(
            voxel=tuple(int(c) for c in rng.integers(0, 40, size=3)),
            feature=(float(rng.normal()), float(rng.random()), float(rng.random())),
            label=1,
        )
        lambda_, sigma1, sigma2 = rng.uniform(0, 2), rng.uniform(0.1, 2), rng.uniform(1, 200)
        w_ab = edge_weight(a, b, lambda_, sigma1, sigma2)
        w_ba = edge_weight(b, a, lambda_, sigma1, sigma2)
        assert w_ab == w_ba
        assert w_ab >= 0.0
    logger.info("✓ w(i,j) = w(j,i)")


def test_edge_weight_formula_and_sigmas():
    """Тест формулы веса и проверки sigma"""
    logger.info("Тест 3: Формула веса")
    a = NodeRecord(voxel=(0, 0, 0), feature=(0.0, 0.9, 0.4), label=1)
    b = NodeRecord(voxel=(1, 2, 0), feature=(1.0, 0.1, 0.4), label=0)
    expected = 2.0 * diversity(0.9, 0.1) + math.exp(-1.0 / (2 * 0.5)) + math.exp(-5.0 / (2 * 100.0))
    assert abs(edge_weight(a, b, 2.0, 0.5, 100.0) - expected) < 1e-12
    for sigma1, sigma2 in ((0.0, 1.0), (1.0, -1.0)):
        try:
            edge_weight(a, b, 1.0, sigma1, sigma2)
            raise AssertionError("ожидалась ValueError для sigma <= 0")
        except ValueError:
            pass
    logger.info("✓ Вес совпадает с формулой")


def test_normalization_matches_dense_oracle():
    """Тест нормированной смежности против плотного оракула"""
    logger.info("Тест 4: Нормировка против плотной матрицы")
    rng = np.random.default_rng(22)
    for case in range(30):
        n = int(rng.integers(2, 51))
        pairs = {(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.15}
        rows = np.array([p[0] for p in sorted(pairs)], dtype=np.int64)
        cols = np.array([p[1] for p in sorted(pairs)], dtype=np.int64)
        weights = rng.uniform(0.0, 5.0, size=rows.size)
        graph = VoxelGraph.from_edges(
            features=rng.normal(size=(n, 3)),
            labels=np.zeros(n, dtype=np.int64),
            rows=rows,
            cols=cols,
            weights=weights,
        )
        dense = np.zeros((n, n))
        dense[rows, cols] = weights
        dense[cols, rows] = weights
        assert np.array_equal(graph.adjacency.toarray(), dense), f"случай {case}"
        normalized = graph.norm_adj.toarray()
        assert np.abs(normalized - _dense_normalized(dense)).max() <= 1e-12
        assert np.array_equal(normalized, normalized.T)
        assert (normalized >= 0).all()
    logger.info("✓ Нормировка совпадает с оракулом")


def test_build_roi_and_nodes():
    """Тест ROI, порядка узлов, признаков и меток"""
    logger.info("Тест 5: ROI и узлы")
    intensity, prediction, maps = _case(23)
    roi = build_roi(maps.uncertain_mask, maps.expectation, 1)
    expected_roi = np.zeros(roi.data.size, dtype=bool)
    uncertain = maps.uncertain_mask.as_bool()
    nz, ny, nx = uncertain.shape
    for z, y, x in np.argwhere(uncertain):
        for dz, dy, dx in ((0, 0, 0), (1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            zz, yy, xx = z + dz, y + dy, x + dx
            if 0 <= zz < nz and 0 <= yy < ny and 0 <= xx < nx:
                expected_roi[xx + nx * (yy + ny * zz)] = True
    expected_roi |= maps.expectation.data > 0.5
    assert np.array_equal(roi.data > 0.5, expected_roi)

    nodes = build_nodes(roi, intensity, maps.expectation, maps.entropy, prediction, maps.uncertain_mask)
    assert np.array_equal(nodes.flat_index, np.flatnonzero(expected_roi))
    assert abs(nodes.features[:, 0].mean()) < 1e-12
    assert abs(nodes.features[:, 0].std() - 1.0) < 1e-12
    assert np.array_equal(nodes.features[:, 1], maps.expectation.data[nodes.flat_index])

    confident = maps.entropy.data[nodes.flat_index] <= TAU
    assert np.array_equal(nodes.labeled_mask, confident)
    assert (nodes.labels[~confident] == UNLABELED).all()
    assert np.array_equal(nodes.labels[confident], prediction.data[nodes.flat_index][confident].astype(np.int64))
    record = nodes.record(0)
    assert record.voxel == tuple(int(c) for c in nodes.coords[0])
    logger.info(f"✓ Узлов {len(nodes)}, размеченных {int(confident.sum())}")


def test_build_nodes_errors():
    """Тест ошибок: пустая ROI и отсутствие размеченных узлов"""
    logger.info("Тест 6: Ошибки построения узлов")
    intensity, prediction, maps = _case(24)
    empty = Volume3.from_array(np.zeros((3, 4, 4)), VolumeKind.MASK)
    try:
        build_nodes(empty, intensity, maps.expectation, maps.entropy, prediction, maps.uncertain_mask)
        raise AssertionError("ожидалась GraphError для пустой ROI")
    except GraphError:
        pass

    half = Volume3.from_array(np.full((3, 4, 4), 0.5), VolumeKind.PROBABILITY)
    entropy = entropy_map(half)
    everything = uncertain_mask(entropy, TAU)
    try:
        build_nodes(everything, intensity, half, entropy, prediction, everything)
        raise AssertionError("ожидалась GraphError без размеченных узлов")
    except GraphError:
        pass
    logger.info("✓ Ошибки построения узлов")


def test_graph_structure_matches_oracle():
    """Тест графа без случайных ребер: соседи по грани и веса против перебора"""
    logger.info("Тест 7: Структура графа против перебора")
    intensity, prediction, maps = _case(25)
    graph = build_graph(
        intensity, prediction, maps,
        k=0, dilation_radius=1, lambda_=1.0, sigma1=0.5, sigma2=100.0, edge_seed=0,
    )
    n = graph.node_count
    assert n <= 48
    dense = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            delta = np.abs(graph.nodes.coords[i] - graph.nodes.coords[j])
            if delta.sum() == 1:
                weight = edge_weight(graph.node(i), graph.node(j), 1.0, 0.5, 100.0)
                dense[i, j] = dense[j, i] = weight
    assert np.abs(graph.adjacency.toarray() - dense).max() <= 1e-12
    assert np.abs(graph.norm_adj.toarray() - _dense_normalized(graph.adjacency.toarray())).max() <= 1e-12
    assert graph.labeled_count + graph.unlabeled_count == n
    for i in range(n):
        ix, iy, iz = graph.nodes.coords[i]
        assert graph.node_index(int(ix), int(iy), int(iz)) == i
    logger.info(f"✓ Граф из {n} узлов совпадает с перебором")


def test_random_edges_properties():
    """Тест случайных ребер: степень, симметрия, детерминизм"""
    logger.info("Тест 8: Случайные дальние ребра")
    intensity, prediction, maps = _case(26, shape=(6, 6, 6))
    roi = build_roi(maps.uncertain_mask, maps.expectation, 2)
    nodes = build_nodes(roi, intensity, maps.expectation, maps.entropy, prediction, maps.uncertain_mask)
    n = len(nodes)
    k = 5
    edges = build_edges(nodes, roi, k, seed=3)
    assert (edges.rows < edges.cols).all()
    keys = edges.rows * n + edges.cols
    assert np.array_equal(keys, np.unique(keys))
    degree = np.bincount(np.concatenate([edges.rows, edges.cols]), minlength=n)
    assert (degree >= min(k, n - 1)).all()

    again = build_edges(nodes, roi, k, seed=3)
    assert np.array_equal(again.rows, edges.rows) and np.array_equal(again.cols, edges.cols)
    other = build_edges(nodes, roi, k, seed=4)
    assert len(other) != len(edges) or not np.array_equal(other.cols, edges.cols)

    clamped = build_edges(nodes, roi, n + 10, seed=0)
    assert len(clamped) == n * (n - 1) // 2
    try:
        build_edges(nodes, roi, -1, seed=0)
        raise AssertionError("ожидалась ValueError для k < 0")
    except ValueError:
        pass
    logger.info(f"✓ Ребер {len(edges)} для {n} узлов")


def _replay_edges(coords: np.ndarray, k: int, seed: int) -> set:
    """Повтор выборки по перебору: соседи по грани, затем пачки по m кандидатов для каждого узла"""
    n = len(coords)
    k = min(k, n - 1)
    neighbours = [set() for _ in range(n)]
    edges = set()
    for i in range(n):
        for j in range(i + 1, n):
            if np.abs(coords[i] - coords[j]).sum() == 1:
                neighbours[i].add(j)
                neighbours[j].add(i)
                edges.add((i, j))
    if k == 0:
        return edges
    rng = np.random.default_rng(seed)
    for i in range(n):
        m = min(k, n - 1 - len(neighbours[i]))
        accepted = []
        while len(accepted) < m:
            for candidate in rng.integers(0, n, size=m).tolist():
                if candidate == i or candidate in neighbours[i] or candidate in accepted:
                    continue
                accepted.append(candidate)
                if len(accepted) == m:
                    break
        for j in accepted:
            neighbours[i].add(j)
            neighbours[j].add(i)
            edges.add((min(i, j), max(i, j)))
    return edges


def test_random_edges_match_replay():
    """Тест ребер против повтора выборки с тем же seed на ROI 4³, k=16"""
    logger.info("Тест 9: Повтор выборки дальних ребер")
    intensity, prediction, maps = _case(28, shape=(4, 4, 4))
    roi = Volume3.from_array(np.ones((4, 4, 4)), VolumeKind.MASK)
    nodes = build_nodes(roi, intensity, maps.expectation, maps.entropy, prediction, maps.uncertain_mask)
    assert len(nodes) == 64
    for seed in (0, 5):
        edges = build_edges(nodes, roi, 16, seed=seed)
        actual = set(zip(edges.rows.tolist(), edges.cols.tolist()))
        expected = _replay_edges(nodes.coords, 16, seed)
        assert actual == expected, f"seed {seed}"
        face = {edge for edge in expected if np.abs(nodes.coords[edge[0]] - nodes.coords[edge[1]]).sum() == 1}
        # 3 оси * 3 пары вдоль оси * 16 линий
        assert len(face) == 144 and face <= actual
    logger.info("✓ Ребра совпадают с повтором выборки")


def test_single_node_graph():
    """Тест графа из одного узла: нет ребер, нормированная смежность [[1]]"""
    logger.info("Тест 10: Граф из одного узла")
    intensity, prediction, maps = _case(29)
    voxel = np.flatnonzero(maps.uncertain_mask.data < 0.5)[0]
    roi_data = np.zeros(maps.expectation.data.size)
    roi_data[voxel] = 1.0
    roi = maps.expectation.like(roi_data, VolumeKind.MASK)
    nodes = build_nodes(roi, intensity, maps.expectation, maps.entropy, prediction, maps.uncertain_mask)
    assert len(build_edges(nodes, roi, 16, seed=0)) == 0
    graph = build_graph(
        intensity, prediction, maps,
        k=16, dilation_radius=1, lambda_=1.0, sigma1=0.5, sigma2=100.0, edge_seed=0, roi=roi,
    )
    assert graph.node_count == 1 and graph.edge_count == 0
    assert graph.norm_adj.toarray().tolist() == [[1.0]]
    logger.info("✓ Изолированный узел")


def test_dump_graph():
    """Тест текстового дампа графа"""
    logger.info("Тест 11: Дамп графа")
    intensity, prediction, maps = _case(27)
    graph = build_graph(
        intensity, prediction, maps,
        k=2, dilation_radius=1, lambda_=1.0, sigma1=0.5, sigma2=100.0, edge_seed=1,
    )
    with tempfile.TemporaryDirectory() as tmp:
        edges_path, nodes_path = dump_graph(graph, Path(tmp) / "graph")
        edge_lines = edges_path.read_text(encoding="utf-8").splitlines()
        node_lines = nodes_path.read_text(encoding="utf-8").splitlines()
    assert len(edge_lines) == graph.edge_count
    assert len(node_lines) == graph.node_count
    first = edge_lines[0].split()
    assert len(first) == 3 and int(first[0]) < int(first[1])
    labels = {int(line.split()[-1]) for line in node_lines}
    assert labels <= {UNLABELED, 0, 1}
    logger.info("✓ Дамп записан")


def run_all_tests():
    """Запуск всех тестов"""
    tests = [
        ("Дивергенция", test_diversity_closed_form),
        ("Симметрия веса", test_edge_weight_symmetry),
        ("Формула веса", test_edge_weight_formula_and_sigmas),
        ("Нормировка", test_normalization_matches_dense_oracle),
        ("ROI и узлы", test_build_roi_and_nodes),
        ("Ошибки узлов", test_build_nodes_errors),
        ("Структура графа", test_graph_structure_matches_oracle),
        ("Случайные ребра", test_random_edges_properties),
        ("Повтор выборки ребер", test_random_edges_match_replay),
        ("Граф из одного узла", test_single_node_graph),
        ("Дамп графа", test_dump_graph),
    ]
    return run_tests("graph_builder", tests)


if __name__ == "__main__":
    success = run_all_tests()
    sys.exit(0 if success else 1)
