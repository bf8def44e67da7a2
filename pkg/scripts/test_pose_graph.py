import json
import sys
import tempfile
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from nlf import autodiff as ad  # noqa: E402
from nlf.autodiff import gradcheck  # noqa: E402
from nlf.errors import GeometryError  # noqa: E402
from nlf.pose_graph import (  # noqa: E402
    CorrespondenceSet,
    GraphEdge,
    PoseGraph,
    build_graph,
    chamfer,
    edge_compatibility,
    graph_loss,
    mnn_match,
    refine_match,
    spatial_consistency,
    write_graph,
)
from nlf.se3 import PoseParams, exp_map  # noqa: E402
from nlf.types import EdgeKind, MatchStage  # noqa: E402


def _brute_mnn(fi: np.ndarray, fj: np.ndarray) -> set[tuple[int, int]]:
    out = set()
    for a in range(len(fi)):
        b = int(np.argmin([np.sum((fi[a] - f) ** 2) for f in fj]))
        back = int(np.argmin([np.sum((fj[b] - f) ** 2) for f in fi]))
        if back == a:
            out.add((a, b))
    return out


def test_mnn_one_dimensional():
    got = mnn_match(np.array([[0.0], [1.0], [5.0]]), np.array([[0.1], [1.1]]))
    assert {tuple(p) for p in got.pairs.tolist()} == {(0, 0), (1, 1)}
    assert got.is_bijective() and got.stage is MatchStage.coarse


def test_mnn_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(10):
        fi, fj = rng.normal(size=(30, 4)), rng.normal(size=(25, 4))
        got = mnn_match(fi, fj)
        assert {tuple(p) for p in got.pairs.tolist()} == _brute_mnn(fi, fj)
        assert got.is_bijective()


def test_mnn_empty_side():
    assert len(mnn_match(np.zeros((0, 3)), np.ones((4, 3)))) == 0


def test_refine_is_fixed_point_of_mnn():
    rng = np.random.default_rng(1)
    fi, fj = rng.normal(size=(40, 3)), rng.normal(size=(40, 3))
    coarse = mnn_match(fi, fj)
    fine = refine_match(coarse, fi, fj)
    assert np.array_equal(fine.pairs, coarse.pairs) and fine.stage is MatchStage.fine
    assert len(refine_match(CorrespondenceSet(np.zeros((0, 2)), MatchStage.coarse), fi, fj)) == 0


def test_edge_compatibility():
    pairs = CorrespondenceSet([[0, 0]], MatchStage.fine)
    value = edge_compatibility(pairs, np.array([[1.0, 0.0]]), np.array([[1.0, 1.0]]))
    assert abs(value - 1.0 / np.sqrt(2.0)) < 1e-12
    assert edge_compatibility(CorrespondenceSet(np.zeros((0, 2)), MatchStage.fine), np.ones((1, 2)), np.ones((1, 2))) == -1.0


def test_spatial_consistency_example():
    a = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 5.0, 0.0]])
    b = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 9.0, 0.0]])
    P, alpha = spatial_consistency(CorrespondenceSet([[0, 0], [1, 1], [2, 2]], MatchStage.fine), a, b, 0.1)
    assert np.allclose(P, [0.5, 0.5, 0.0])
    assert abs(alpha - 1.0 / 3.0) < 1e-12
    P, alpha = spatial_consistency(CorrespondenceSet([[0, 0]], MatchStage.fine), a, b, 0.1)
    assert alpha == 0.0


def test_build_graph_two_frames_always_has_sequential_edge():
    rng = np.random.default_rng(2)
    pts = [rng.normal(size=(20, 3)) for _ in range(2)]
    feats = [rng.normal(size=(20, 5)) for _ in range(2)]
    graph = build_graph(pts, feats, edge_threshold=0.99, tau_d=0.1)
    assert len(graph) == 1 and graph.edges[0].kind is EdgeKind.sequential
    assert graph.is_connected()


def test_build_graph_threshold_and_identical_copies():
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(25, 3))
    feats = rng.normal(size=(25, 6))
    strict = build_graph([pts] * 3, [feats] * 3, edge_threshold=1.0, tau_d=0.01)
    assert [(e.i, e.j) for e in strict.edges] == [(0, 1), (1, 2)]
    loose = build_graph([pts] * 3, [feats] * 3, edge_threshold=0.5, tau_d=0.01)
    assert len(loose.loops) == 1 and (loose.loops[0].i, loose.loops[0].j) == (0, 2)
    assert all(abs(e.weight - 1.0) < 1e-12 for e in loose.edges)
    assert all(e.n_pairs == 25 for e in loose.edges)


def _frames(rng: np.random.Generator, n: int = 5, size: int = 30) -> tuple[list[np.ndarray], list[np.ndarray]]:
    base_pts = rng.uniform(-1.0, 1.0, size=(size, 3))
    base_feats = rng.normal(size=(size, 6))
    points, feats = [], []
    for k in range(n):
        pts = base_pts + rng.normal(scale=0.002, size=base_pts.shape)
        pts[: k * 4] = rng.uniform(-1.0, 1.0, size=(k * 4, 3))
        points.append(pts)
        feats.append(base_feats + rng.normal(scale=0.3 * (k + 1), size=base_feats.shape))
    return points, feats


def test_build_graph_is_rigid_invariant():
    rng = np.random.default_rng(10)
    points, feats = _frames(rng)
    T = exp_map([0.4, -1.2, 0.3, 0.5, -0.2, 1.1])
    moved = [T.apply_points(p) for p in points]
    ref = build_graph(points, feats, edge_threshold=0.2, tau_d=0.05)
    got = build_graph(moved, feats, edge_threshold=0.2, tau_d=0.05)
    assert [(e.i, e.j, e.kind) for e in got.edges] == [(e.i, e.j, e.kind) for e in ref.edges]
    for a, b in zip(ref.edges, got.edges):
        assert abs(a.weight - b.weight) < 1e-12 and abs(a.compatibility - b.compatibility) < 1e-12
    assert any(0.0 < e.weight < 1.0 for e in ref.edges)

    fine = refine_match(mnn_match(feats[0], feats[1]), feats[0], feats[1])
    _, alpha = spatial_consistency(fine, points[0], points[1], 0.05)
    _, alpha_moved = spatial_consistency(fine, moved[0], moved[1], 0.05)
    assert abs(alpha - alpha_moved) < 1e-12


def test_loop_edges_shrink_as_threshold_tightens():
    points, feats = _frames(np.random.default_rng(11), n=6)
    previous = None
    sizes = []
    for threshold in np.linspace(-1.0, 1.0, 21):
        graph = build_graph(points, feats, edge_threshold=float(threshold), tau_d=0.05)
        edges = {(e.i, e.j) for e in graph.edges}
        if previous is not None:
            assert edges <= previous, threshold
        previous = edges
        sizes.append(len(graph.loops))
    assert sizes[0] > sizes[-1] == 0


def test_graph_loss_converges_on_overlapping_frames():
    rng = np.random.default_rng(12)
    cloud = rng.uniform(-1.0, 1.0, size=(200, 3))
    poses = PoseParams(np.array([np.zeros(6), [0.01, -0.008, 0.012, 0.01, -0.012, 0.008]]))
    graph = _two_frame_graph(1.0)
    (xi,) = poses.trainable()
    history = []
    for _ in range(200):
        with ad.Tape():
            loss = graph_loss(graph, [cloud, cloud], poses)
            ad.backward(loss)
        history.append(loss.item())
        xi.data = xi.data - 0.05 * xi.grad
        xi.grad = None
    windows = [np.mean(history[k : k + 20]) for k in range(0, len(history), 20)]
    assert all(b <= a + 1e-12 * history[0] for a, b in zip(windows, windows[1:])), windows
    assert history[-1] < 1e-4 * history[0]


def test_build_graph_rejects_single_frame():
    try:
        build_graph([np.zeros((3, 3))], [np.zeros((3, 2))], 0.5, 0.1)
    except GeometryError:
        pass
    else:
        raise AssertionError("single-frame graph accepted")


def test_chamfer_values():
    assert chamfer(np.zeros((1, 3)), np.array([[1.0, 0.0, 0.0]])) == 2.0
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(15, 3)), rng.normal(size=(12, 3))
    d = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
    assert abs(chamfer(a, b) - (d.min(axis=1).mean() + d.min(axis=0).mean())) < 1e-12
    assert chamfer(a, a) == 0.0


def _two_frame_graph(alpha: float) -> PoseGraph:
    return PoseGraph(2, [GraphEdge(0, 1, 0.9, alpha, EdgeKind.sequential, 10)])


def test_graph_loss_zero_weight():
    rng = np.random.default_rng(5)
    clouds = [rng.normal(size=(10, 3)) for _ in range(2)]
    poses = PoseParams(rng.normal(size=(2, 6)) * 0.1)
    assert graph_loss(_two_frame_graph(0.0), clouds, poses).item() == 0.0
    try:
        graph_loss(PoseGraph(2), clouds, poses)
    except GeometryError:
        pass
    else:
        raise AssertionError("empty graph accepted")


def test_graph_loss_gradient():
    rng = np.random.default_rng(6)
    clouds = [rng.normal(size=(12, 3)) for _ in range(2)]
    poses = PoseParams(rng.normal(size=(2, 6)) * 0.1)
    err = gradcheck(lambda: graph_loss(_two_frame_graph(0.7), clouds, poses), poses.trainable())
    assert err < 1e-4, err


def test_write_graph_jsonl():
    graph = _two_frame_graph(0.5)
    with tempfile.TemporaryDirectory() as tmp:
        path = write_graph(Path(tmp) / "graph.jsonl", graph)
        write_graph(path, graph)
        lines = path.read_text().splitlines()
        assert len(lines) == 2
        record = json.loads(lines[0])
        assert record["alpha"] == 0.5 and record["kind"] == "sequential"
        write_graph(path, graph, append=False)
        assert len(path.read_text().splitlines()) == 1


def _run() -> None:
    for name, fn in sorted(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"ok  {name}")


if __name__ == "__main__":
    _run()
