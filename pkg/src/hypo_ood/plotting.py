"""Figure rendering for CLI reports. Uses the non-interactive Agg backend."""
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def variation_heatmap(variation, path, title="Intra-class variation"):
    """One heatmap per class: env x env matrix of the per-cell distance."""
    envs = sorted({e for pair in variation["env_pairs"] for e in pair})
    index = {e: i for i, e in enumerate(envs)}
    classes = variation["classes"]
    grids = {y: np.zeros((len(envs), len(envs))) for y in classes}
    for c in variation["cells"]:
        a, b = index[c["env_a"]], index[c["env_b"]]
        grids[c["label"]][a, b] = grids[c["label"]][b, a] = c["value"]
    vmax = max(float(variation["aggregate"]), 1e-12)
    fig, axes = plt.subplots(1, len(classes), figsize=(3.2 * len(classes), 3.0), squeeze=False)
    for ax, y in zip(axes[0], classes):
        im = ax.imshow(grids[y], cmap="viridis", vmin=0.0, vmax=vmax)
        ax.set_title(f"class {y}")
        ax.set_xticks(range(len(envs)), labels=[str(e) for e in envs])
        ax.set_yticks(range(len(envs)), labels=[str(e) for e in envs])
        ax.set_xlabel("env")
        for i in range(len(envs)):
            for j in range(len(envs)):
                ax.text(j, i, f"{grids[y][i, j]:.3f}", ha="center", va="center",
                        color="w", fontsize=7)
    fig.colorbar(im, ax=axes[0].tolist(), shrink=0.8)
    fig.suptitle(f"{title} ({variation['rho']})")
    return _save(fig, path)


def training_curves(history, path):
    """Loss components and train accuracy against epoch."""
    epochs = [r["epoch"] for r in history]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    for key in ("total_loss", "var_loss", "sep_loss"):
        vals = [r.get(key) for r in history]
        if any(v is not None for v in vals):
            ax1.plot(epochs, [np.nan if v is None else v for v in vals], label=key)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    if history:
        ax1.legend(fontsize=8)
    ax2.plot(epochs, [r["train_acc"] for r in history], color="k")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("train accuracy")
    fig.tight_layout()
    return _save(fig, path)


def _save(fig, path):
    path = Path(path)
    # fixed metadata keeps repeated renders byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path
