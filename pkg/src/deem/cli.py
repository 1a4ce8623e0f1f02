"""Command-line entry point.

Subcommands: synth-data, train, generate, reconstruct, build-benchmark,
evaluate. Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure.
Every command writes ``manifest.json`` (arguments, resolved config, seed)
into its output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, load_config
from .datamodel import DocumentError, ImageRecord, InterleavedDocument, TextSpan, deserialize_docs, load_image, save_png
from .robustvqa import MissingAnswersError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
log = logging.getLogger("deem")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def write_manifest(out_dir, command: str, args: dict, seed, config=None, **extra) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"command": command, "version": __version__, "seed": seed, "args": args, "config": config}
    manifest.update(extra)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    return path


def _args_dict(ns) -> dict:
    return {k: v for k, v in vars(ns).items() if k != "func"}


def cmd_synth_data(ns) -> int:
    from .synth import generate_dataset, write_pixel_embeddings

    if ns.n_train < 1 or ns.n_ood < 1:
        raise UsageError("--n-train and --n-ood must be at least 1")
    manifest = generate_dataset(ns.n_train, ns.n_ood, ns.seed, ns.out, ns.size, ns.n_off)
    write_pixel_embeddings(ns.out, ns.seed)
    # the dataset manifest already carries the seed; the command manifest sits beside it
    write_manifest(Path(ns.out) / "run", "synth-data", _args_dict(ns), ns.seed, dataset=manifest)
    print(f"wrote {manifest['n_train']} training documents and {manifest['n_ood']} OOD images to {ns.out}")
    return EXIT_OK


def _load_training_docs(cfg, rng) -> list:
    from .sequence import filter_interleaved, keep_caption, sample_mixture

    sources, weights = {}, {}
    for src in cfg.data:
        docs = []
        for doc in deserialize_docs(src.path):
            imgs = doc.images
            if any(im.similarity_score is not None for im in imgs) or len(imgs) > 1:
                doc = filter_interleaved(doc, rng)
            elif imgs:
                texts = [e.text for e in doc.elements if isinstance(e, TextSpan)]
                if not texts or not keep_caption(" ".join(texts)):
                    doc = None
            if doc is not None:
                docs.append(doc)
        sources[src.path], weights[src.path] = docs, src.weight
    total = sum(len(v) for v in sources.values())
    if total == 0:
        raise DocumentError("no training documents survive filtering")
    return sample_mixture(sources, weights, total, rng)


def cmd_train(ns) -> int:
    import torch

    from .model import DEEMModel
    from .rng import RngStreams
    from .sequence import Tokenizer
    from .training import load_checkpoint, run_stage

    cfg = load_config(ns.config)
    stage = cfg.stage(ns.stage)
    out = Path(ns.out or cfg.out_dir) / ns.stage
    write_manifest(out, "train", _args_dict(ns), cfg.seed, cfg.to_dict())
    streams = RngStreams(cfg.seed)
    docs = _load_training_docs(cfg, streams.numpy("data-filter"))
    for doc in docs:
        for im in doc.images:
            if im.pixels.shape[:2] != (cfg.model.resolution, cfg.model.resolution):
                raise DocumentError(f"{doc.doc_id}: image {im.pixels.shape[:2]} does not match resolution {cfg.model.resolution}")
    if ns.init:
        model, _ = load_checkpoint(ns.init)
    else:
        texts = [e.text for d in docs for e in d.elements if isinstance(e, TextSpan)]
        torch.manual_seed(cfg.seed)
        model = DEEMModel(cfg.model, Tokenizer.from_corpus(texts))
    ckpt, records = run_stage(model, docs, stage, out, seed=cfg.seed, checkpoint_every=ns.checkpoint_every)
    last = records[-1] if records else {}
    print(f"{ns.stage}: {len(records)} steps, final total loss {last.get('total', float('nan')):.4f}; checkpoint {ckpt}")
    return EXIT_OK


def cmd_generate(ns) -> int:
    from .generation import generate
    from .training import load_checkpoint

    model, _ = load_checkpoint(ns.checkpoint)
    elements = []
    if ns.prompt_image:
        elements.append(ImageRecord(load_image(ns.prompt_image)))
    if ns.prompt:
        elements.append(TextSpan(ns.prompt))
    if not elements:
        raise UsageError("give --prompt and/or --prompt-image")
    out = Path(ns.out)
    write_manifest(out, "generate", _args_dict(ns), ns.seed, {"model": asdict(model.config)})
    forced = [model.special.soi_id] if ns.force_image else []
    tr = generate(
        model,
        InterleavedDocument(elements, "prompt"),
        max_tokens=ns.max_tokens,
        max_images=ns.max_images,
        temperature=ns.temperature,
        top_k=ns.top_k,
        guidance_scale=ns.guidance,
        diffusion_steps=ns.steps,
        seed=ns.seed,
        forced_tokens=forced,
    )
    paths = []
    for i, img in enumerate(tr.images):
        p = out / f"image_{i:03d}.png"
        save_png(img, p)
        paths.append(p.name)
    (out / "transcript.json").write_text(
        json.dumps({"text": tr.text, "token_ids": tr.token_ids, "generated": tr.generated, "images": paths}, indent=2)
    )
    print(tr.text)
    return EXIT_OK


def cmd_reconstruct(ns) -> int:
    import torch

    from .diffusion import DiffusionCondition, reconstruct_partial
    from .training import load_checkpoint

    if not 0 < ns.noise_frac <= 1:
        raise UsageError("--noise-frac must be in (0, 1]")
    model, _ = load_checkpoint(ns.checkpoint)
    pixels = load_image(ns.image)
    res = model.config.resolution
    if pixels.shape != (res, res, 3):
        raise DocumentError(f"image shape {pixels.shape} does not match model resolution {res}")
    out = Path(ns.out)
    t_star = model.schedule.start_step(ns.noise_frac)
    write_manifest(out, "reconstruct", _args_dict(ns), ns.seed, {"model": asdict(model.config)}, t_star=t_star)
    with torch.no_grad():
        px = torch.as_tensor(pixels)[None]
        cond = DiffusionCondition(model.visual_tokens(px), "encoder_tokens")
        rec = reconstruct_partial(
            model.denoiser, model.schedule, px, cond, ns.noise_frac, torch.Generator().manual_seed(ns.seed), ns.guidance
        )
    save_png(rec[0].numpy(), out / "reconstruction.png")
    np.save(out / "reconstruction.npy", rec[0].numpy())
    print(f"reconstructed from t*={t_star} into {out}")
    return EXIT_OK


def _read_jsonl(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(l) for l in fh if l.strip()]


def cmd_build_benchmark(ns) -> int:
    from .robustvqa import LabeledImage, build_benchmark, write_benchmark

    labels = _read_jsonl(ns.labels)
    emb = np.load(ns.embeddings, allow_pickle=False)
    for key in ("labels", "label_vectors", "image_refs", "image_vectors"):
        if key not in emb:
            raise DocumentError(f"{ns.embeddings}: missing array {key!r}")
    label_emb = dict(zip(emb["labels"].tolist(), emb["label_vectors"]))
    image_emb = dict(zip(emb["image_refs"].tolist(), emb["image_vectors"]))
    items = []
    for rec in labels:
        ref = rec["image_ref"]
        if ref not in image_emb:
            raise DocumentError(f"no embedding for image {ref!r}")
        items.append(LabeledImage(ref, rec["gt_label"], image_emb[ref]))
    bench = build_benchmark(items, label_emb, ns.format)
    out = Path(ns.out)
    write_manifest(out, "build-benchmark", _args_dict(ns), None)
    n = write_benchmark(bench, out / "benchmark.jsonl")
    print(f"wrote {n} items to {out / 'benchmark.jsonl'}")
    return EXIT_OK


def cmd_evaluate(ns) -> int:
    from .robustvqa import evaluate, read_answers, read_benchmark

    items = read_benchmark(ns.benchmark)
    out = Path(ns.out)
    write_manifest(out, "evaluate", _args_dict(ns), ns.seed)
    answers_path = ns.answers
    if answers_path is None:
        if not (ns.checkpoint and ns.images):
            raise UsageError("give --answers, or --checkpoint with --images")
        from .generation import answer_question
        from .training import load_checkpoint

        model, _ = load_checkpoint(ns.checkpoint)
        images = {d.doc_id: d.images[0] for d in deserialize_docs(ns.images) if d.images}
        answers_path = out / "answers.jsonl"
        with open(answers_path, "w") as fh:
            for it in items:
                if it.image_ref not in images:
                    raise DocumentError(f"no image for {it.image_ref!r}")
                raw = answer_question(model, ImageRecord(images[it.image_ref].pixels), it.question, max_tokens=ns.max_tokens)
                fh.write(json.dumps({"item_id": it.item_id, "raw_output": raw}) + "\n")
    report = evaluate(items, read_answers(answers_path, items))
    (out / "report.json").write_text(json.dumps(report, indent=2))
    print(f"accuracy {report['accuracy']:.4f} over {report['overall']['total']} items")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="deem", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-data", help="render the synthetic shapes dataset")
    s.add_argument("--n-train", type=int, default=1000)
    s.add_argument("--n-ood", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--n-off", type=int, default=1, help="off-home colors per shape in the training split")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("train", help="run one training stage")
    s.add_argument("--config", required=True)
    s.add_argument("--stage", choices=("S1", "S2", "S3"), required=True)
    s.add_argument("--init", help="checkpoint to start from")
    s.add_argument("--out", help="defaults to out_dir from the config")
    s.add_argument("--checkpoint-every", type=int, default=0)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("generate", help="interleaved generation from a prompt")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--prompt", default="")
    s.add_argument("--prompt-image")
    s.add_argument("--force-image", action="store_true", help="make the first generated token <SOI>")
    s.add_argument("--max-tokens", type=int, default=32)
    s.add_argument("--max-images", type=int, default=1)
    s.add_argument("--temperature", type=float, default=1.0)
    s.add_argument("--top-k", type=int, default=50)
    s.add_argument("--guidance", type=float, default=3.0)
    s.add_argument("--steps", type=int, default=None, help="diffusion sampling steps")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("reconstruct", help="partially noise an image and denoise it back")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--noise-frac", type=float, default=0.65)
    s.add_argument("--guidance", type=float, default=3.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("build-benchmark", help="mine hard negatives and render questions")
    s.add_argument("--labels", required=True, help="jsonl of {image_ref, gt_label}")
    s.add_argument("--embeddings", required=True, help="npz with labels, label_vectors, image_refs, image_vectors")
    s.add_argument("--format", choices=("yesno", "multichoice-gt-first", "multichoice-neg-first"), default="yesno")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_benchmark)

    s = sub.add_parser("evaluate", help="score answers against a benchmark")
    s.add_argument("--benchmark", required=True)
    s.add_argument("--answers", help="jsonl of {item_id, raw_output}")
    s.add_argument("--checkpoint", help="answer the benchmark with this model instead")
    s.add_argument("--images", help="document file holding the benchmark images (doc_id = image_ref)")
    s.add_argument("--max-tokens", type=int, default=2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    from .training import NumericError

    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return ns.func(ns)
    except UsageError as exc:
        print(f"deem {ns.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"deem {ns.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DocumentError, ConfigError, MissingAnswersError, FileNotFoundError, KeyError, json.JSONDecodeError) as exc:
        print(f"deem {ns.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
