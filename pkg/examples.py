"""
Example usage of the mtl-lab library
"""
import io

import numpy as np

from affinity_rsa import format_affinity_table, task_affinity
from balancing import BalanceSettings, mgda_min_norm, weight_schedule
from branch_search import BudgetModel, format_tree, search_optimal_tree
from contrastive import EmbeddingQueue, contrastive_loss, knn_loss, l2_normalize, mine_neighbors
from crops import multicrop_views
from distill import build_params, run_distill_check
from pixel_affinity import AffinityRule, dilation_sweep
from tensor_io import LabelMap, read_trace


def example_task_affinity_and_branching():
    """Example: affinity from random features, then the best tree under a budget"""
    print("Example 1: Task Affinity + Branch Search")
    print("-" * 60)

    rng = np.random.default_rng(0)
    shared = rng.standard_normal((40, 16))
    features = {
        'seg': [shared + 0.1 * rng.standard_normal((40, 16)), rng.standard_normal((40, 8))],
        'depth': [shared + 0.1 * rng.standard_normal((40, 16)), rng.standard_normal((40, 8))],
        'normals': [rng.standard_normal((40, 16)), rng.standard_normal((40, 8))],
    }
    affinity = task_affinity(features, ['seg', 'depth', 'normals'], ['early', 'late'])
    print(format_affinity_table(affinity))

    model = BudgetModel(shared_costs=(1.0, 1.0), decoder_costs=(0.5, 0.5, 0.5), budget=5.0)
    tree = search_optimal_tree(affinity, model)
    print("\n" + format_tree(tree, affinity.tasks, affinity.locations))


def example_dynamic_weighting():
    """Example: DWA weights over a short loss trace, plus an MGDA direction"""
    print("\n\nExample 2: Task Balancing")
    print("-" * 60)

    trace = read_trace(io.StringIO(
        "iter,task,loss,grad_norm\n"
        "0,seg,2.0,\n0,depth,1.0,\n"
        "1,seg,1.6,\n1,depth,0.98,\n"
        "2,seg,1.3,\n2,depth,0.97,\n"
    ))
    for wv in weight_schedule(trace, BalanceSettings(strategy='dwa')):
        print(f"iter {wv.iteration}: " + ', '.join(f"{t}={w:.4f}" for t, w in zip(trace.tasks, wv.weights)))

    res = mgda_min_norm(np.array([[1.0, 0.0], [0.0, 1.0]]))
    print(f"MGDA alphas {res.alphas}, common direction norm {res.norm:.4f}")


def example_contrastive():
    """Example: contrastive loss and nearest-neighbour positives from a dual queue"""
    print("\n\nExample 3: Contrastive Losses")
    print("-" * 60)

    rng = np.random.default_rng(1)
    anchor = l2_normalize(rng.standard_normal(8))
    positives = l2_normalize(anchor + 0.1 * rng.standard_normal((2, 8)))
    negatives = l2_normalize(rng.standard_normal((16, 8)))
    print(f"contrastive loss: {contrastive_loss(anchor, positives, negatives, 0.2).loss:.4f}")

    queue = EmbeddingQueue.empty(capacity=32, dim=8, backbone_dim=4)
    queue = queue.push(l2_normalize(rng.standard_normal((32, 8))), l2_normalize(rng.standard_normal((32, 4))))
    neighbours = mine_neighbors(l2_normalize(rng.standard_normal(4)), queue, k=5)
    print(f"neighbours {neighbours.tolist()}, kNN loss {knn_loss(anchor, queue, neighbours, 0.2).loss:.4f}")

    views = multicrop_views(224, 224, n_small=4, seed=7, strict=True)
    print(f"anchor crop {views.anchor}, {len(views.small)} small crops inside it")


def example_pixel_affinity():
    """Example: how far segmentation and depth agree on local pixel affinities"""
    print("\n\nExample 4: Pixel Affinity")
    print("-" * 60)

    seg = np.zeros((16, 16), dtype=np.int64)
    seg[:, 8:] = 1
    depth = np.where(seg == 1, 4.0, 1.0) + 0.01 * np.arange(16)[None, :]
    maps = {'seg': LabelMap('categorical', seg), 'depth': LabelMap('continuous', depth)}
    rules = {'seg': AffinityRule('equality'), 'depth': AffinityRule('relative', threshold=0.05)}
    for d, a, b, corr in dilation_sweep(maps, rules, [1, 2, 4]):
        print(f"d={d}: {a} vs {b} -> {corr:.4f}")


def example_distillation():
    """Example: every distillation operator against its per-pixel loop"""
    print("\n\nExample 5: Distillation Operators")
    print("-" * 60)

    rng = np.random.default_rng(2)
    for operator in ('padnet', 'mtinet', 'harmonize', 'se', 'fpm'):
        scales = 2 if operator == 'mtinet' else 1
        features = [rng.standard_normal((3, 4, 6, 6)) for _ in range(scales)]
        params = build_params(operator, 3, 4, scales, rng)
        result = run_distill_check(operator, features, params)
        print(f"{operator:<10} max error {result['max_abs_error']:.2e}")


if __name__ == "__main__":
    example_task_affinity_and_branching()
    example_dynamic_weighting()
    example_contrastive()
    example_pixel_affinity()
    example_distillation()

    print("\n" + "=" * 60)
    print("Command line: mtl-lab --help")
    print("=" * 60)
