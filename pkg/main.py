"""
mtl-lab - multi-task learning numerics over files
Every subcommand reads a YAML run config, writes deterministic artifacts to
the output directory and echoes progress to stderr.
"""
import logging
import sys
import time
from pathlib import Path
from typing import Dict, List

import click
import numpy as np
import torch
import yaml
from pydantic import ValidationError

from affinity_rsa import AffinityTensor, format_affinity_table, task_affinity
from balancing import BalanceSettings, delta_mtl, format_percent, weight_schedule
from branch_search import BudgetModel, format_partition, format_tree, rank_trees, search_optimal_tree
from config import Config
from crops import iou_pair_stats
from distill import build_params, run_distill_check
from errors import DimensionError, MtlLabError
from gradcheck import run_gradient_suite
from pixel_affinity import SWEEP_HEADER, AffinityRule, binarize_edges, dilation_sweep
from schemas import COMMANDS, RunConfig, load_config_file, schema_help
from tensor_io import (LabelMap, read_kpis, read_metrics, read_tensor_file, read_trace, write_csv,
                       write_tensor_file, write_text)

logger = logging.getLogger(__name__)

COMMAND_HELP = {
    'affinity': "RDM task-affinity tensor from per-task feature dumps.",
    'branch-search': "Lowest-cost branched architecture within a resource budget.",
    'balance': "Per-iteration task weights from a loss trace.",
    'delta-mtl': "Average relative change of a multi-task model against baselines.",
    'pixel-affinity': "Cross-task pixel-affinity correspondence per kernel dilation.",
    'contrastive-check': "Finite-difference check of the contrastive, kNN and uncertainty gradients.",
    'crop-stats': "IoU histogram of random resized crop pairs.",
    'distill-check': "Distillation operators against per-pixel reference loops.",
}

ORACLE_TOLERANCE = 1e-12


def _banner(title: str):
    click.echo("\n" + "=" * 70, err=True)
    click.echo(title, err=True)
    click.echo("=" * 70, err=True)


class MtlLabRunner:
    """Runs one validated subcommand and writes its artifacts"""

    def __init__(self, run_config: RunConfig):
        self.config = run_config
        self.params = run_config.params
        self.output = Path(run_config.output)
        self.metadata = run_config.metadata()
        self.rng = np.random.default_rng(run_config.seed)
        self.progress = logging.getLogger().isEnabledFor(logging.INFO)

    def run(self) -> int:
        """
        Dispatch to the subcommand handler

        Returns:
            Process exit status
        """
        handlers = {
            'affinity': self.run_affinity,
            'branch-search': self.run_branch_search,
            'balance': self.run_balance,
            'delta-mtl': self.run_delta_mtl,
            'pixel-affinity': self.run_pixel_affinity,
            'contrastive-check': self.run_contrastive_check,
            'crop-stats': self.run_crop_stats,
            'distill-check': self.run_distill_check,
        }
        start = time.time()
        self.output.mkdir(parents=True, exist_ok=True)
        _banner(f"mtl-lab {self.config.command} (seed {self.config.seed})")

        status = handlers[self.config.command]()

        mark = "✓" if status == 0 else "❌"
        click.echo(f"{mark} Finished in {time.time() - start:.2f}s, artifacts in {self.output}", err=True)
        return status

    def _path(self, name: str) -> Path:
        return self.output / name

    # -- affinity -----------------------------------------------------------

    def run_affinity(self) -> int:
        p = self.params
        features: Dict[str, List[np.ndarray]] = {}
        for task in p.tasks:
            dumps = []
            for path in p.features[task]:
                dump = read_tensor_file(path)
                if dump.shape[0] < p.num_images:
                    logger.warning("%s has %d rows, fewer than num_images=%d", path, dump.shape[0], p.num_images)
                dumps.append(dump[:p.num_images])
            features[task] = dumps
        click.echo(f"  Loaded {len(p.tasks)} tasks x {len(p.locations)} locations", err=True)

        affinity = task_affinity(features, p.tasks, p.locations, n_jobs=self.config.threads)
        meta = {**self.metadata, 'tasks': ','.join(p.tasks), 'locations': ','.join(p.locations)}
        write_tensor_file(self._path('affinity.mtkt'), affinity.values, meta)
        table = format_affinity_table(affinity)
        write_text(self._path('affinity.txt'), table.splitlines(), meta)
        click.echo(table)
        return 0

    # -- branch-search ------------------------------------------------------

    def run_branch_search(self) -> int:
        p = self.params
        values = read_tensor_file(p.affinity)
        if values.ndim != 3:
            raise DimensionError(f"{p.affinity}: affinity tensor must be D x N x N, got {values.shape}")
        d, n = values.shape[0], values.shape[1]
        tasks = p.tasks or [f"t{i}" for i in range(n)]
        locations = p.locations or [str(l) for l in range(d)]
        affinity = AffinityTensor(values, tasks, locations)
        model = BudgetModel(tuple(p.shared_costs), tuple(p.decoder_costs), p.budget)

        best = search_optimal_tree(affinity, model)
        ranked = rank_trees(affinity, model)
        click.echo(f"  {len(ranked)} trees fit budget {p.budget:g}", err=True)

        text = format_tree(best, tasks, locations)
        write_text(self._path('tree.txt'), text.splitlines(), self.metadata)
        rows = [
            (rank, tree.cost, tree.resource, ' > '.join(format_partition(layer, tasks) for layer in tree.layers))
            for rank, tree in enumerate(ranked, 1)
        ]
        write_csv(self._path('trees.csv'), ['rank', 'cost', 'resource', 'layers'], rows, self.metadata)
        click.echo(text)
        return 0

    # -- balance ------------------------------------------------------------

    def run_balance(self) -> int:
        p = self.params
        trace = read_trace(p.trace)
        click.echo(f"  Trace: {trace.num_tasks} tasks, {len(trace.iterations())} iterations", err=True)

        unknown = set(p.importance or {}) | set(p.groups or {})
        unknown -= set(trace.tasks)
        if unknown:
            raise DimensionError(f"config names tasks missing from the trace: {sorted(unknown)}")

        gradients = None
        if p.gradients is not None:
            g = read_tensor_file(p.gradients)
            if g.ndim < 3:
                raise DimensionError(f"{p.gradients}: gradients must be [T, N, P], got {g.shape}")
            gradients = g.reshape(g.shape[0], g.shape[1], -1)

        settings = BalanceSettings(
            strategy=p.strategy,
            weights=p.weights,
            temperature=p.temperature,
            sigmas=p.sigmas,
            learning_rate=p.learning_rate,
            kpis=read_kpis(p.kpis, trace.tasks) if p.kpis is not None else None,
            gamma=p.gamma,
            window=p.window,
            every=p.every,
            importance=[p.importance.get(t, 1.0) for t in trace.tasks] if p.importance else None,
            gradients=gradients,
            groups=[p.groups.get(t, t) for t in trace.tasks] if p.groups else None,
        )
        schedule = weight_schedule(trace, settings)
        rows = [
            (wv.iteration, task, float(w))
            for wv in schedule
            for task, w in zip(trace.tasks, wv.weights)
        ]
        write_csv(self._path('weights.csv'), ['iter', 'task', 'weight'], rows, self.metadata)
        last = schedule[-1]
        click.echo(f"  {p.strategy} weights at iteration {last.iteration}: "
                   + ', '.join(f"{t}={w:.4f}" for t, w in zip(trace.tasks, last.weights)), err=True)
        return 0

    # -- delta-mtl ----------------------------------------------------------

    def run_delta_mtl(self) -> int:
        value = delta_mtl(read_metrics(self.params.model), read_metrics(self.params.baseline))
        text = format_percent(value)
        write_text(self._path('delta_mtl.txt'), [text], self.metadata)
        click.echo(text)
        return 0

    # -- pixel-affinity -----------------------------------------------------

    def run_pixel_affinity(self) -> int:
        p = self.params
        maps, rules = {}, {}
        for task, spec in p.maps.items():
            values = read_tensor_file(spec.path)
            if spec.kind == 'edge':
                maps[task] = binarize_edges(values, spec.binarize)
                rules[task] = AffinityRule('equality', radius=p.radius)
            elif spec.kind == 'categorical':
                maps[task] = LabelMap('categorical', values)
                rules[task] = AffinityRule('equality', radius=p.radius)
            else:
                maps[task] = LabelMap('continuous', values)
                rules[task] = AffinityRule('relative', threshold=spec.threshold, radius=p.radius)

        rows = dilation_sweep(maps, rules, p.dilations)
        write_csv(self._path('sweep.csv'), SWEEP_HEADER, rows, self.metadata)
        for d, a, b, corr in rows:
            click.echo(f"  d={d:<3} {a} vs {b}: {corr:.4f}", err=True)
        return 0

    # -- contrastive-check --------------------------------------------------

    def run_contrastive_check(self) -> int:
        p = self.params
        worst = run_gradient_suite(p.instances, p.dim, p.queue_size, p.temperature, p.epsilon,
                                   seed=self.config.seed, progress=self.progress)
        rows = [(name, err, 'pass' if err <= p.tolerance else 'fail') for name, err in worst.items()]
        write_csv(self._path('gradcheck.csv'), ['loss', 'max_relative_error', 'status'], rows, self.metadata)
        for name, err, status in rows:
            click.echo(f"{name}: max relative error {err:.3e} ({status})")
        failed = [r[0] for r in rows if r[2] == 'fail']
        if failed:
            click.echo(f"❌ Gradient check failed for: {', '.join(failed)}", err=True)
            return 1
        return 0

    # -- crop-stats ---------------------------------------------------------

    def run_crop_stats(self) -> int:
        p = self.params
        stats = iou_pair_stats(p.width, p.height, tuple(p.scale_range), p.threshold, p.samples, self.rng,
                               tuple(p.aspect_range), p.bins, progress=self.progress)
        meta = {**self.metadata, 'acceptance_rate': format(stats.acceptance_rate, '.17g')}
        write_csv(self._path('iou_hist.csv'), ['bin_lo', 'bin_hi', 'count'], stats.rows(), meta)
        click.echo(f"acceptance rate: {stats.acceptance_rate:.6f}")
        return 0

    # -- distill-check ------------------------------------------------------

    def run_distill_check(self) -> int:
        p = self.params
        if p.features:
            features = [read_tensor_file(path) for path in p.features]
        else:
            count = p.scales if p.operator == 'mtinet' else 1
            features = [self.rng.standard_normal((p.tasks, p.channels, p.height, p.width)) for _ in range(count)]
        for f in features:
            if f.ndim != 4 or f.shape[:2] != features[0].shape[:2]:
                raise DimensionError("feature stacks must be N x C x H x W with one N, C across scales")

        loaded = {name: read_tensor_file(path) for name, path in p.params.items()} if p.params else None
        n, c = features[0].shape[:2]
        params = build_params(p.operator, n, c, len(features), self.rng, p.kernel_size, loaded)

        torch.set_num_threads(self.config.threads)
        result = run_distill_check(p.operator, features, params)

        for i, out in enumerate(result['outputs']):
            write_tensor_file(self._path(f"distill_{i}.mtkt"), np.ascontiguousarray(out), self.metadata)
        error = result['max_abs_error']
        status = 'match' if error <= ORACLE_TOLERANCE else 'mismatch'
        lines = [f"operator={p.operator}", f"outputs={len(result['outputs'])}",
                 f"max_abs_error={error:.17g}", f"oracle={status}"]
        write_text(self._path('distill_report.txt'), lines, self.metadata)
        click.echo(f"{p.operator}: max |op - per-pixel loop| = {error:.3e} ({status})")
        return 0 if status == 'match' else 1


def _describe(error: ValidationError) -> str:
    parts = []
    for err in error.errors():
        key = '.'.join(str(part) for part in err['loc']) or '<config>'
        parts.append(f"{key}: {err['msg']}")
    return "invalid run config: " + "; ".join(parts)


def _run(ctx: click.Context, command: str):
    opts = ctx.obj
    try:
        raw = load_config_file(opts['config'])
        run_config = RunConfig.build(command, raw, opts['seed'], opts['threads'], opts['output'])
    except ValidationError as e:
        raise click.UsageError(_describe(e), ctx=ctx)
    except (OSError, yaml.YAMLError, ValueError) as e:
        raise click.UsageError(str(e), ctx=ctx)

    try:
        status = MtlLabRunner(run_config).run()
    except (MtlLabError, FileNotFoundError) as e:
        raise click.ClickException(str(e))
    ctx.exit(status)


@click.group(context_settings={'help_option_names': ['-h', '--help']})
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False),
              help="YAML run config for the subcommand.")
@click.option('--seed', type=click.IntRange(0, 2 ** 64 - 1), default=None,
              help=f"Random seed (default {Config.DEFAULT_SEED}).")
@click.option('--threads', type=click.IntRange(1), default=None,
              help=f"Worker threads (default {Config.THREADS}).")
@click.option('--output', type=click.Path(file_okay=False), default=None,
              help=f"Output directory (default ./{Config.OUTPUT_DIR}).")
@click.option('--verbose', '-v', is_flag=True, help="Log progress at INFO level.")
@click.version_option(Config.TOOL_VERSION, prog_name=Config.TOOL_NAME)
@click.pass_context
def cli(ctx, config_path, seed, threads, output, verbose):
    """Multi-task learning numerics: affinity, branching, balancing, contrastive and distillation checks."""
    logging.basicConfig(
        level=logging.INFO if verbose else Config.LOG_LEVEL,
        format='%(levelname)s %(name)s: %(message)s',
        stream=sys.stderr,
        force=True,
    )
    ctx.obj = {'config': config_path, 'seed': seed, 'threads': threads, 'output': output}


def _register(command: str):
    @cli.command(name=command, help=COMMAND_HELP[command], epilog="\b\n" + schema_help(command))
    @click.pass_context
    def subcommand(ctx):
        _run(ctx, command)
    return subcommand


for _name in COMMANDS:
    _register(_name)


def main():
    """Main entry point for CLI"""
    cli(prog_name=Config.TOOL_NAME)


if __name__ == "__main__":
    main()
