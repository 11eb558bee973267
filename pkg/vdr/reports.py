"""Tabular summaries of rollouts, benchmarks, ablations and RL batches."""
from collections import defaultdict
from typing import Dict, List, Mapping, Sequence, Tuple

import pandas as pd
from rich.console import Console
from rich.table import Table

from vdr.dataset import VqaInstance
from vdr.rlprep import RolloutGroup
from vdr.rollout import BatchResult, RolloutMetrics


def rollout_summary(metrics: Sequence[RolloutMetrics]) -> pd.DataFrame:
    """One row per termination reason plus an 'all' row."""
    by_reason: Dict[str, List[RolloutMetrics]] = defaultdict(list)
    for m in metrics:
        by_reason[m.termination].append(m)
    rows = []
    for reason, group in sorted(by_reason.items()) + [("all", list(metrics))]:
        count = len(group)
        rows.append({
            'Termination': reason,
            'Trajectories': count,
            'Mean_Turns': round(sum(m.turns for m in group) / count, 2) if count else 0,
            'Mean_Tool_Calls': round(sum(m.tool_calls for m in group) / count, 2) if count else 0,
            'Mean_Tokens': round(sum(m.tokens for m in group) / count, 1) if count else 0,
            'Answer_Rate_percent': round(sum(m.answered for m in group) / count * 100, 1) if count else 0,
        })
    return pd.DataFrame(rows)


def bench_report(async_result: BatchResult, sync_result: BatchResult, concurrency: int,
                 tool_pool_size: int) -> pd.DataFrame:
    speedup = sync_result.wall_s / async_result.wall_s if async_result.wall_s > 0 else float("inf")
    return pd.DataFrame([
        {'Scheduler': 'async', 'Tasks': len(async_result.trajectories), 'Concurrency': concurrency,
         'Tool_Pool': tool_pool_size, 'Wall_s': round(async_result.wall_s, 3),
         'Peak_Tool_Workers': async_result.peak_tool_workers, 'Speedup': round(speedup, 2)},
        {'Scheduler': 'sync', 'Tasks': len(sync_result.trajectories), 'Concurrency': 1,
         'Tool_Pool': 1, 'Wall_s': round(sync_result.wall_s, 3),
         'Peak_Tool_Workers': sync_result.peak_tool_workers, 'Speedup': 1.0},
    ])


def correct_rate(result: BatchResult) -> float:
    trajectories = result.ordered()
    if not trajectories:
        return 0.0
    hits = sum(1 for t in trajectories if t.answer is not None and t.answer == t.ground_truth)
    return hits / len(trajectories)


def ablation_table(results: Mapping[str, BatchResult]) -> pd.DataFrame:
    rows = []
    for mode, result in results.items():
        metrics = result.metrics
        count = len(metrics)
        rows.append({
            'Mode': mode,
            'Tasks': count,
            'Answer_Rate_percent': round(correct_rate(result) * 100, 1),
            'Mean_Turns': round(sum(m.turns for m in metrics) / count, 2) if count else 0,
            'Mean_Tool_Calls': round(sum(m.tool_calls for m in metrics) / count, 2) if count else 0,
        })
    return pd.DataFrame(rows)


def batch_summary(groups: Sequence[RolloutGroup]) -> pd.DataFrame:
    records = [
        {'prompt_id': g.prompt_id, 'reward': r, 'masked': m, 'steps': len(t.steps)}
        for g in groups for t, r, m in zip(g.trajectories, g.rewards, g.masked)
    ]
    if not records:
        return pd.DataFrame([{'Groups': 0, 'Trajectories': 0, 'Mean_Reward': 0.0,
                              'Masked_percent': 0.0, 'Mean_Steps': 0.0}])
    df = pd.DataFrame(records)
    return pd.DataFrame([{
        'Groups': len(groups),
        'Trajectories': len(df),
        'Mean_Reward': round(df['reward'].mean(), 4),
        'Masked_percent': round(df['masked'].mean() * 100, 1),
        'Mean_Steps': round(df['steps'].mean(), 2),
    }])


def print_table(df: pd.DataFrame, title: str, console: Console = None):
    console = console or Console()
    table = Table(title=title)
    for column in df.columns:
        table.add_column(str(column).replace('_', ' '))
    for row in df.itertuples(index=False):
        table.add_row(*(str(value) for value in row))
    console.print(table)


def dataset_summary(instances: Sequence[VqaInstance]) -> pd.DataFrame:
    """Instance counts and mean obfuscation depth per source and split."""
    columns = ['Source', 'Split', 'Instances', 'Mean_Depth']
    if not instances:
        return pd.DataFrame(columns=columns)
    df = pd.DataFrame([
        {'Source': i.source.value, 'Split': i.split.value if i.split else 'none', 'depth': i.depth}
        for i in instances
    ])
    summary = df.groupby(['Source', 'Split']).agg(Instances=('depth', 'size'), Mean_Depth=('depth', 'mean'))
    summary = summary.reset_index()
    summary['Mean_Depth'] = summary['Mean_Depth'].round(2)
    return summary[columns]


def discard_table(counts: Sequence[Tuple[str, int]]) -> pd.DataFrame:
    return pd.DataFrame(list(counts), columns=['Reason', 'Trajectories'])
