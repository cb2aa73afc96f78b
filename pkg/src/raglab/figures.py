"""Matplotlib renderers for the report path; every figure lands next to the
delimited output it illustrates."""
from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

GOLDEN = (math.sqrt(5) - 1.0) / 2.0


def _new_axes(width=7.0):
    fig, ax = plt.subplots(figsize=(width, width * GOLDEN))
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    return fig, ax


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def loss_curve(curve: list[float], path, title="training loss", smooth: int = 25):
    fig, ax = _new_axes()
    ax.plot(curve, alpha=0.35, lw=0.8, label="per step")
    if len(curve) > smooth:
        kernel = [1 / smooth] * smooth
        smoothed = [sum(curve[max(0, i - smooth + 1): i + 1]) / len(curve[max(0, i - smooth + 1): i + 1])
                    for i in range(len(curve))]
        ax.plot(smoothed, lw=1.6, label=f"smoothed ({smooth})")
        ax.legend(frameon=False)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    return _save(fig, path)


def component_curves(curves: dict[str, list[float]], path, title="alignment loss"):
    fig, ax = _new_axes()
    for name, values in curves.items():
        ax.plot(values, lw=1.2, label=name)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.set_title(title)
    ax.legend(frameon=False)
    return _save(fig, path)


def adapter_losses(doc_ids: list[str], base: list[float], final: list[float], path):
    fig, ax = _new_axes(width=max(7.0, 0.18 * len(doc_ids)))
    x = range(len(doc_ids))
    ax.bar(x, base, width=0.8, alpha=0.4, label="base model")
    ax.bar(x, final, width=0.5, label="with adapter")
    ax.set_xticks(list(x))
    ax.set_xticklabels(doc_ids, rotation=90, fontsize=5)
    ax.set_ylabel("mean triple loss")
    ax.set_title("per-document adapter fit")
    ax.legend(frameon=False)
    return _save(fig, path)


def metrics_by_mode(aggregates: dict[str, dict], path):
    modes = list(aggregates)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 10 * GOLDEN / 1.6))
    x = range(len(modes))
    em = [aggregates[m].get("em", 0.0) for m in modes]
    f1 = [aggregates[m].get("f1", 0.0) for m in modes]
    ax1.bar([i - 0.2 for i in x], em, width=0.4, label="EM")
    ax1.bar([i + 0.2 for i in x], f1, width=0.4, label="F1")
    ax1.set_xticks(list(x))
    ax1.set_xticklabels(modes, rotation=20)
    ax1.set_ylim(0, 1)
    ax1.set_title("answer quality")
    ax1.legend(frameon=False)
    ctx = [aggregates[m].get("ctx_tokens", 0.0) for m in modes]
    resp = [aggregates[m].get("resp_tokens", 0.0) for m in modes]
    ax2.bar([i - 0.2 for i in x], ctx, width=0.4, label="context tokens")
    ax2.bar([i + 0.2 for i in x], resp, width=0.4, label="response tokens")
    ax2.set_xticks(list(x))
    ax2.set_xticklabels(modes, rotation=20)
    ax2.set_title("token budgets")
    ax2.legend(frameon=False)
    for ax in (ax1, ax2):
        ax.spines["right"].set_visible(False)
        ax.spines["top"].set_visible(False)
    return _save(fig, path)


def cost_comparison(table: dict[str, dict], path):
    methods = list(table)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 10 * GOLDEN / 1.6))
    inf = [table[m]["inference"] for m in methods]
    train = [max(table[m]["training"], 1.0) for m in methods]
    ax1.bar(methods, inf, color="tab:blue")
    ax1.set_yscale("log")
    ax1.set_title("inference cost (units)")
    ax2.bar(methods, train, color="tab:orange")
    ax2.set_yscale("log")
    ax2.set_title("training cost (units, log floor 1)")
    for ax in (ax1, ax2):
        ax.spines["right"].set_visible(False)
        ax.spines["top"].set_visible(False)
    return _save(fig, path)


def ablation(values: list, metric: list[float], param_name: str, path):
    fig, ax = _new_axes()
    ax.plot(values, metric, marker="o")
    ax.set_xlabel(param_name)
    ax.set_ylabel("EM")
    ax.set_title(f"ablation over {param_name}")
    return _save(fig, path)
