"""Command-line entry point: ``rule-kit <subcommand> ...``.

Exit status: 0 success, 1 other toolkit error, 2 invalid input or usage,
3 no retrieval depth certified, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .dpo import DpoConfig, dpo_loss
from .errors import EmptyLambdaHat, Malformed, NoErrors, RuleKitError, ValidationError
from .pipeline import PipelineConfig, default_seed, run_report
from .preference import mine_preferences, over_reliance_ratio
from .retrieval import (
    Corpus,
    EmbeddingMatrix,
    assemble_prompt,
    normalize_rows,
    top_k_retrieve,
    train_projections,
)
from .risk import CalibrationCertificate, CalibrationInput, calibrate, simulate_coverage

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INVALID = 2
EXIT_NO_SAFE_K = 3
EXIT_IO = 4


def _emit(doc, out: str | None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _add_risk_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--alpha", type=float, dest="alpha_risk", help="risk upper bound (default 0.1)")
    p.add_argument("--delta", type=float, help="tolerance level (default 0.05)")
    p.add_argument("--k-min", type=int, dest="k_min", help="smallest candidate k (default 1)")
    p.add_argument("--k-max", type=int, dest="k_max", help="largest candidate k (default 5)")
    p.add_argument("--procedure", choices=["bonferroni", "fixed-sequence"],
                   help="FWER procedure (default bonferroni)")


def _config_from_args(args, **extra) -> PipelineConfig:
    overrides = {
        "alpha_risk": args.alpha_risk,
        "delta": args.delta,
        "k_min": args.k_min,
        "k_max": args.k_max,
        "procedure": args.procedure,
        "seed": getattr(args, "seed", None),
        **extra,
    }
    if getattr(args, "config", None):
        return PipelineConfig.from_file(args.config, **overrides)
    return PipelineConfig(**{k: v for k, v in overrides.items() if v is not None})


# ---------------------------------------------------------------------------
# subcommands


def cmd_index(args) -> int:
    if args.from_jsonl:
        ids, rows = [], []
        for line, obj in io.iter_jsonl(args.from_jsonl):
            if not isinstance(obj, dict) or not isinstance(obj.get("id"), str) \
                    or not isinstance(obj.get("embedding"), list):
                raise Malformed(line, 'expected {"id": str, "embedding": [number, ...]}')
            ids.append(obj["id"])
            rows.append(obj["embedding"])
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate ids in embedding source")
        try:
            data = np.asarray(rows, dtype=np.float32)
        except ValueError:
            raise ValidationError("embedding rows have unequal lengths") from None
        matrix = EmbeddingMatrix(data)
        normalize_rows(matrix)
        emb_path = Path(args.emb)
        io.write_embeddings(matrix, emb_path)
        io.write_ids(ids, args.ids or io.ids_path_for(emb_path))
    matrix = io.read_embeddings(args.emb)
    ids = io.read_ids(args.ids or io.ids_path_for(args.emb))
    corpus = Corpus(matrix, ids)
    summary = {"rows": matrix.rows, "dim": matrix.dim, "ids": len(corpus.ids)}
    if args.corpus:
        reports = io.read_corpus(args.corpus)
        missing = [i for i in corpus.ids if i not in reports]
        if missing:
            raise ValidationError(f"{len(missing)} embedding ids have no report, e.g. {missing[0]!r}")
        summary["reports"] = len(reports)
    _emit(summary, None)
    return EXIT_OK


def cmd_retrieve(args) -> int:
    corpus = Corpus(io.read_embeddings(args.corpus_emb),
                    io.read_ids(args.corpus_ids or io.ids_path_for(args.corpus_emb)))
    queries = io.read_embeddings(args.queries)
    query_ids = io.read_ids(args.query_ids or io.ids_path_for(args.queries))
    if len(query_ids) != queries.rows:
        raise ValidationError(f"{len(query_ids)} query ids for {queries.rows} query rows")
    k = args.k
    if k is None:
        cert = CalibrationCertificate.from_json(Path(args.certificate).read_text(encoding="utf-8"))
        if cert.chosen_k is None:
            raise EmptyLambdaHat(cert)
        k = cert.chosen_k
    reports = io.read_corpus(args.reports) if args.reports else None
    questions = {}
    if args.questions:
        for line, obj in io.iter_jsonl(args.questions):
            if not isinstance(obj, dict) or not isinstance(obj.get("id"), str) \
                    or not isinstance(obj.get("question"), str):
                raise Malformed(line, 'expected {"id": str, "question": str}')
            questions[obj["id"]] = obj["question"]

    rows = []
    for qid, vec in zip(query_ids, np.asarray(queries.data, np.float64)):
        hits = top_k_retrieve(vec, corpus, k)
        row = {"query_id": qid, "k": k,
               "hits": [{"id": h.corpus_id, "score": h.score, "rank": h.rank} for h in hits]}
        if reports is not None and qid in questions:
            row["prompt"] = assemble_prompt(questions[qid], [reports[h.corpus_id] for h in hits])
        rows.append(row)
    if args.out:
        io.dump_jsonl(rows, args.out)
    else:
        for row in rows:
            sys.stdout.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")
    return EXIT_OK


def cmd_train_proj(args) -> int:
    v_img, v_txt = io.read_embeddings(args.img), io.read_embeddings(args.txt)
    out_dim = args.out_dim or v_img.dim
    result = train_projections(v_img, v_txt, out_dim, args.epochs, args.lr, args.seed)
    np.savez(args.out, w_img=result.heads.w_img, w_txt=result.heads.w_txt)
    _emit({"initial_loss": result.initial_loss, "final_loss": result.final_loss,
           "epochs": args.epochs, "trace": result.trace}, args.trace)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    config = _config_from_args(args, predictions=args.predictions)
    records = io.parse_predictions(config.predictions)
    cert = calibrate(CalibrationInput(
        records, config.candidates, config.alpha_risk, config.delta, config.procedure
    ))
    _emit(cert.to_dict(), args.out)
    return EXIT_OK if cert.lambda_hat else EXIT_NO_SAFE_K


def cmd_mine(args) -> int:
    records = io.parse_predictions(args.predictions)
    k = args.k
    if k is None:
        cert = CalibrationCertificate.from_json(Path(args.certificate).read_text(encoding="utf-8"))
        if cert.chosen_k is None:
            raise EmptyLambdaHat(cert)
        k = cert.chosen_k
    pairs = mine_preferences(records, k)
    io.write_preferences(pairs, args.out)
    summary = {"k": k, "records": len(records), "pairs": len(pairs)}
    try:
        ratio = over_reliance_ratio(records, k)
        summary["over_reliance"] = {"numerator": ratio.numerator,
                                    "denominator": ratio.denominator, "ratio": ratio.ratio}
    except NoErrors:
        summary["over_reliance"] = None
    _emit(summary, None)
    return EXIT_OK


def cmd_dpo_loss(args) -> int:
    batch = io.read_dpo_batch(args.batch)
    mean, losses = dpo_loss(batch, DpoConfig(args.beta))
    doc = {"beta_dpo": args.beta, "items": len(batch), "mean_loss": mean}
    if args.per_item:
        doc["per_item"] = [{"id": it.id, "loss": loss} for it, loss in zip(batch, losses)]
    _emit(doc, args.out)
    return EXIT_OK


def cmd_report(args) -> int:
    config = _config_from_args(
        args, predictions=args.predictions, out=args.out, beta_dpo=args.beta,
        mine=False if args.no_mine else None,
    )
    summary = run_report(config)
    _emit(summary, None)
    return EXIT_OK


def cmd_simulate(args) -> int:
    try:
        risks = [float(r) for r in args.risks.split(",")]
    except ValueError:
        raise ValidationError(f"--risks must be comma-separated numbers, got {args.risks!r}") from None
    seed = default_seed() if args.seed is None else args.seed
    report = simulate_coverage(
        risks, args.n, args.alpha_risk, args.delta, args.procedure, args.trials, seed
    )
    doc = report.to_dict()
    doc.update({"risk_curve": risks, "n": args.n, "alpha_risk": args.alpha_risk,
                "delta": args.delta, "procedure": args.procedure})
    _emit(doc, args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rule-kit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("index", help="build or validate an EMB1 embedding file")
    p.add_argument("emb", help="EMB1 file to validate (or write with --from-jsonl)")
    p.add_argument("--ids", help="companion id file (default: <emb>.ids)")
    p.add_argument("--from-jsonl", help='build from JSONL rows {"id", "embedding"}')
    p.add_argument("--corpus", help="report JSONL to cross-check ids against")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("retrieve", help="top-k reports for query embeddings")
    p.add_argument("--corpus-emb", required=True)
    p.add_argument("--corpus-ids")
    p.add_argument("--queries", required=True, help="EMB1 file of query embeddings")
    p.add_argument("--query-ids")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--k", type=int)
    g.add_argument("--certificate", help="use chosen_k from a calibration certificate")
    p.add_argument("--reports", help="corpus JSONL; with --questions, emits prompts")
    p.add_argument("--questions", help='JSONL {"id": query id, "question": str}')
    p.add_argument("--out")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("train-proj", help="fit linear projection heads with the contrastive loss")
    p.add_argument("--img", required=True)
    p.add_argument("--txt", required=True)
    p.add_argument("--out-dim", type=int)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output .npz with w_img, w_txt")
    p.add_argument("--trace", help="write loss trace JSON here instead of stdout")
    p.set_defaults(func=cmd_train_proj)

    p = sub.add_parser("calibrate", help="certify retrieval depths from prediction logs")
    p.add_argument("--predictions")
    p.add_argument("--config")
    _add_risk_flags(p)
    p.add_argument("--out", help="certificate path (default stdout)")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("mine", help="mine over-reliance preference pairs")
    p.add_argument("--predictions", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--k", type=int)
    g.add_argument("--certificate")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("dpo-loss", help="evaluate the DPO loss on a log-probability batch")
    p.add_argument("--batch", required=True)
    p.add_argument("--beta", type=float, default=0.1)
    p.add_argument("--per-item", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_dpo_loss)

    p = sub.add_parser("report", help="calibrate, score and mine in one run")
    p.add_argument("--predictions")
    p.add_argument("--config")
    _add_risk_flags(p)
    p.add_argument("--beta", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-mine", action="store_true")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("simulate", help="Monte-Carlo check of the FWER guarantee")
    p.add_argument("--risks", required=True, help="comma-separated true risk per k, k=1..")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--alpha", type=float, dest="alpha_risk", default=0.1)
    p.add_argument("--delta", type=float, default=0.05)
    p.add_argument("--procedure", choices=["bonferroni", "fixed-sequence"], default="bonferroni")
    p.add_argument("--trials", type=int, default=2000)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except EmptyLambdaHat as exc:
        print(f"rule-kit: no safe k: {exc}", file=sys.stderr)
        return EXIT_NO_SAFE_K
    except ValidationError as exc:
        print(f"rule-kit: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"rule-kit: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except RuleKitError as exc:
        print(f"rule-kit: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
