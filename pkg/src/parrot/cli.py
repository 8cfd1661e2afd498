"""Command-line entry point."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

from .catalog import Catalog
from .config import Mode, RunConfig
from .embedding import Embedder
from .evaluation import evaluate, load_truth
from .records import Label, RecordError, load
from .retrieval import VectorStore, reindex

logger = logging.getLogger("parrot")


def _config(args) -> RunConfig:
    return RunConfig.from_file(args.config) if args.config else RunConfig()


def _paths(cfg: RunConfig) -> tuple[Path, Path]:
    if not (cfg.records_path and cfg.vectors_path):
        raise SystemExit("config needs records_path and vectors_path")
    rp, vp = Path(cfg.records_path), Path(cfg.vectors_path)
    rp.parent.mkdir(parents=True, exist_ok=True)
    vp.parent.mkdir(parents=True, exist_ok=True)
    return rp, vp


def cmd_seed(args) -> int:
    cfg = _config(args)
    rp, vp = _paths(cfg)
    labels = {}
    if args.labels:
        with open(args.labels, newline="", encoding="utf-8") as fh:
            for row in csv.reader(fh):
                if row and row[0].strip().isdigit():
                    labels[int(row[0])] = Label(row[1].strip())
    embedder = Embedder(cfg.embedder)
    store = VectorStore.load(rp, vp, embedder) if rp.exists() and vp.exists() else VectorStore(embedder)
    added = skipped = 0
    reader = load(args.records)
    for rec in reader:
        label = labels.get(rec.id, rec.label)
        if label is Label.UNLABELED:
            skipped += 1
            continue
        if rec.id in store:
            logger.warning("record %d already stored; skipped", rec.id)
            skipped += 1
            continue
        try:
            store.insert(rec, label)
        except RecordError as exc:
            logger.warning("record %d: %s", rec.id, exc)
            skipped += 1
            continue
        added += 1
    store.save(rp, vp)
    print(f"seeded {added} records ({skipped} skipped, {reader.partial_lines} partial lines); "
          f"store: {store.count(Label.SUCCESS)} Success, {store.count(Label.FAILED)} Failed")
    return 0


def cmd_crawl(args) -> int:
    from .pipeline import Pipeline, ingest, read_allowlist, read_url_lines
    from .crawler.domain import DohResolver

    cfg = _config(args)
    modes = list(Mode) if args.mode == "all" else [Mode.parse(args.mode)]
    urls = read_url_lines(args.urls)
    if args.allowlist or args.parking or args.resolve:
        res = ingest(
            urls,
            read_allowlist(args.allowlist) if args.allowlist else (),
            DohResolver() if args.resolve else None,
            args.parking or (),
        )
        for url, reason in res.dropped:
            print(f"dropped {url}: {reason}", file=sys.stderr)
        urls = res.kept
    truth = load_truth(args.truth) if args.truth else None
    pipe = Pipeline.from_config(cfg, out_dir=args.out)
    t0 = time.perf_counter()
    records = pipe.run_batch(urls, modes, truth=truth)
    pipe.write_run(records, args.out)
    by_mode: dict[str, list] = {}
    for r in records:
        by_mode.setdefault(r.mode.value, []).append(r)
    for mode, rs in by_mode.items():
        hits = sum(r.verdict.value == "Phishing" for r in rs)
        print(f"{mode}: {hits}/{len(rs)} Phishing")
    print(f"{len(urls)} URLs in {time.perf_counter() - t0:.1f}s; results in {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .pipeline import load_verdicts

    truth = load_truth(args.truth)
    runs = Path(args.runs)
    files = [runs] if runs.is_file() else sorted(runs.rglob("verdicts.jsonl"))
    if not files:
        raise SystemExit(f"no verdicts.jsonl under {runs}")
    rows = [row for f in files for row in load_verdicts(f)]
    out = {}
    for mode in sorted({r.mode for r in rows}):
        out[mode] = evaluate([r for r in rows if r.mode == mode], truth).to_dict()
    print(json.dumps(out, indent=2))
    return 0


def cmd_simulate(args) -> int:
    from .cloaksim import SimServer, generate_corpus, save_corpus

    corpus = generate_corpus(args.families, args.per_family, args.seed)
    with SimServer(corpus, port=args.port, host=args.host, expose_oracle=not args.no_oracle) as srv:
        if args.corpus_out:
            save_corpus(args.corpus_out, corpus)
        if args.proxies_out:
            Path(args.proxies_out).write_text(json.dumps(srv.proxy_map().to_dict(), indent=1), "utf-8")
        print(f"serving {len(corpus)} scenarios on {srv.base_url} (proxy form: {srv.proxy_url('JP', 'Residential')})")
        try:
            while True:
                time.sleep(3600)
        except KeyboardInterrupt:
            pass
    return 0


def cmd_reindex(args) -> int:
    cfg = _config(args)
    rp, vp = _paths(cfg)
    store = reindex(rp, vp, Embedder(cfg.embedder))
    print(f"reindexed {len(store)} records into {vp}")
    return 0


def cmd_catalog(args) -> int:
    cfg = _config(args)
    catalog = Catalog.from_file(cfg.catalog_path) if cfg.catalog_path else Catalog()
    for e in catalog.enumerate():
        if args.json:
            print(json.dumps(e.to_dict()))
        else:
            print(f"{e.os}\t{e.browser}\t{e.location}\t{e.network}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="parrot", description=__doc__)
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("seed", help="insert labeled crawl records into the store")
    s.add_argument("--records", required=True)
    s.add_argument("--labels", help="CSV record_id,label overriding labels in the records file")
    s.set_defaults(func=cmd_seed)

    s = sub.add_parser("crawl", help="crawl URLs in one mode or all three")
    s.add_argument("--mode", default="parrot", choices=["parrot", "standard", "typical", "all"])
    s.add_argument("--urls", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--truth", help="CSV url,verdict used by the feedback loop")
    s.add_argument("--allowlist", help="popular domains to drop before crawling")
    s.add_argument("--parking", action="append", help="regex of parking pages (repeatable)")
    s.add_argument("--resolve", action="store_true", help="drop NXDOMAIN hosts before crawling")
    s.set_defaults(func=cmd_crawl)

    s = sub.add_parser("eval", help="score crawl runs against ground truth")
    s.add_argument("--runs", required=True)
    s.add_argument("--truth", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("simulate", help="serve a generated cloaking corpus")
    s.add_argument("--families", type=int, default=8)
    s.add_argument("--per-family", type=int, default=25)
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--port", type=int, default=8808)
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--no-oracle", action="store_true", help="disable /oracle and /log")
    s.add_argument("--corpus-out")
    s.add_argument("--proxies-out", help="write a proxy map pointing at the simulator")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("reindex", help="rebuild the vector sidecar from the record file")
    s.set_defaults(func=cmd_reindex)

    s = sub.add_parser("catalog", help="catalog utilities")
    csub = s.add_subparsers(dest="catalog_command", required=True)
    c = csub.add_parser("list", help="print all catalog entries")
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=cmd_catalog)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
