"""Single-step commands: gen-data, train, attack, corrupt, analyze."""

import logging
import sys

import click

logger = logging.getLogger(__name__)

from selrobust.runner import (  # noqa: E402
    ANALYSES,
    run_analyze,
    run_attack,
    run_corrupt,
    run_gen_data,
    run_train,
)
from selrobust.output import print_stage_result  # noqa: E402

SPLIT_CHOICE = click.Choice(["train", "val", "test"])


@click.command("gen-data")
@click.option("--out", required=True, help="Dataset output directory")
@click.option("--seed", type=int, default=None, help="Generator seed")
@click.option("--classes", "n_classes", type=int, default=None, help="Number of classes")
@click.option("--train-per-class", type=int, default=None, help="Training samples per class")
@click.option("--val-per-class", type=int, default=None, help="Validation samples per class")
@click.option("--test-per-class", type=int, default=None, help="Test samples per class")
@click.option("--image-size", type=int, default=None, help="Image height and width in pixels")
@click.option("--noise", type=float, default=None, help="Pixel noise standard deviation")
@click.pass_context
def gen_data(ctx, out, seed, n_classes, train_per_class, val_per_class, test_per_class, image_size, noise):
    """Generate the synthetic pattern dataset."""
    logger.debug("Stage 'gen-data' starting: out=%s, seed=%s", out, seed)
    rc = run_gen_data(
        out=out, settings=ctx.obj, seed=seed, n_classes=n_classes,
        train_per_class=train_per_class, val_per_class=val_per_class,
        test_per_class=test_per_class, image_size=image_size, noise=noise,
    )
    print_stage_result("gen-data", rc, out)
    if rc != 0:
        sys.exit(rc)


@click.command()
@click.option("--alpha", required=True, type=float, help="Selectivity regularization scale")
@click.option("--seed", required=True, type=int, help="Replicate seed (init and shuffling)")
@click.option("--data", default=None, type=click.Path(exists=True), help="Dataset directory (default: generate)")
@click.option("--out", default=None, help="Run directory (default: <output_dir>/runs/<cell>)")
@click.option("--epochs", type=int, default=None, help="Number of epochs")
@click.option("--lr", "learning_rate", type=float, default=None, help="Initial learning rate")
@click.option("--batch-size", type=int, default=None, help="Minibatch size")
@click.option("--pgd-train-steps", type=int, default=0, show_default=True,
              help="PGD iterations per training minibatch (0 = standard training)")
@click.pass_context
def train(ctx, alpha, seed, data, out, epochs, learning_rate, batch_size, pgd_train_steps):
    """Train one model and select its best validation epoch."""
    logger.debug("Stage 'train' starting: alpha=%s, seed=%d, data=%s, out=%s", alpha, seed, data, out)
    rc = run_train(
        alpha=alpha, seed=seed, settings=ctx.obj, data=data, out=out, epochs=epochs,
        learning_rate=learning_rate, batch_size=batch_size, pgd_train_steps=pgd_train_steps,
    )
    print_stage_result("train", rc, out or "")
    if rc != 0:
        sys.exit(rc)


@click.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True), help="Checkpoint directory")
@click.option("--data", required=True, type=click.Path(exists=True), help="Dataset directory")
@click.option("--kind", type=click.Choice(["fgsm", "pgd"]), default="fgsm", show_default=True)
@click.option("--epsilon", required=True, type=float, help="l-infinity budget (e.g. 0.0627 for 16/255)")
@click.option("--steps", type=int, default=10, show_default=True, help="PGD iterations")
@click.option("--step-size", type=float, default=None, help="PGD step (default: --step-fraction * epsilon)")
@click.option("--step-fraction", type=float, default=0.1, show_default=True)
@click.option("--split", type=SPLIT_CHOICE, default="test", show_default=True)
@click.option("--dump", default=None, help="Directory for the adversarial images (STNS)")
@click.option("--out", default=None, help="Summary JSON path")
@click.pass_context
def attack(ctx, checkpoint, data, kind, epsilon, steps, step_size, step_fraction, split, dump, out):
    """Run an FGSM or PGD attack against a checkpoint."""
    logger.debug("Stage 'attack' starting: checkpoint=%s, kind=%s, epsilon=%s", checkpoint, kind, epsilon)
    rc = run_attack(
        checkpoint=checkpoint, data=data, kind=kind, epsilon=epsilon, steps=steps,
        step_size=step_size, step_fraction=step_fraction, split=split, dump=dump, out=out,
    )
    print_stage_result("attack", rc, out or "")
    if rc != 0:
        sys.exit(rc)


@click.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True), help="Checkpoint directory")
@click.option("--data", required=True, type=click.Path(exists=True), help="Dataset directory")
@click.option("--seed", type=int, default=None, help="Corruption seed")
@click.option("--split", type=SPLIT_CHOICE, default="test", show_default=True)
@click.option("--out", default=None, help="Suite CSV path (summary JSON is written alongside)")
@click.pass_context
def corrupt(ctx, checkpoint, data, seed, split, out):
    """Evaluate a checkpoint on the corruption suite."""
    logger.debug("Stage 'corrupt' starting: checkpoint=%s, seed=%s, out=%s", checkpoint, seed, out)
    rc = run_corrupt(checkpoint=checkpoint, data=data, settings=ctx.obj, seed=seed, split=split, out=out)
    print_stage_result("corrupt", rc, out or "")
    if rc != 0:
        sys.exit(rc)


@click.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True), help="Checkpoint directory")
@click.option("--data", required=True, type=click.Path(exists=True), help="Dataset directory")
@click.option("--what", required=True, type=click.Choice(list(ANALYSES)), help="Analysis to run")
@click.option("--source", type=click.Choice(["none", "corruption", "pgd"]), default="none", show_default=True,
              help="Perturbation for difference-matrix dimensionality")
@click.option("--spectral", is_flag=True, default=None, help="Spectral instead of Frobenius Jacobian norm")
@click.option("--split", type=SPLIT_CHOICE, default="test", show_default=True)
@click.option("--out", default=None, help="Directory for the CSV tables")
@click.pass_context
def analyze(ctx, checkpoint, data, what, source, spectral, split, out):
    """Selectivity, gradient variability, Jacobian or dimensionality of a checkpoint."""
    logger.debug("Stage 'analyze' starting: checkpoint=%s, what=%s, source=%s", checkpoint, what, source)
    rc = run_analyze(
        checkpoint=checkpoint, data=data, what=what, settings=ctx.obj,
        source=source, spectral=spectral, split=split, out=out,
    )
    print_stage_result(f"analyze {what}", rc, out or "")
    if rc != 0:
        sys.exit(rc)
