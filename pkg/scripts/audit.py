"""
Contamination audit command line.

    python scripts/audit.py validate --dataset en=data/mmlu.en.jsonl --dataset fr=data/mmlu.fr.jsonl
    python scripts/audit.py stats --dataset data/xquad.en.jsonl --out stats.csv
    python scripts/audit.py audit tacd --dataset en=... --dataset ar=... --dataset fr=... \
        --endpoint http://host:8000 --out runs/tacd
    python scripts/audit.py sweep tacd --p 0 10 50 100 --dataset ... --mock \
        --config sweep.yaml --out runs/sweep
    python scripts/audit.py mock-serve --dataset ... --p 50 --port 8765
    python scripts/audit.py convert squad xquad.ar.json ar data/xquad.ar.jsonl

Exit codes: 0 success, 1 dataset or configuration error, 2 endpoint failure.
"""

import argparse
import signal
import sys
import threading
from dataclasses import fields, replace
from datetime import datetime, timezone
from pathlib import Path

import pandas as pd
import yaml
from dotenv import load_dotenv

from convert import convert_mmlu_csv, convert_squad
from corpus import (
    align_parallel,
    corpus_stats,
    dataset_digest,
    dump_dataset,
    load_dataset,
)
from errors import ConfigError, DatasetError, EndpointError, MetricError
from logging_config import get_logger
from mockmodel import MockConfig, MockManifest, serve
from modelclient import EndpointConfig, ModelClient
from perturb import MASK_STRATEGIES, PERMUTATION_MODES, load_template
from probes import (
    PROBES,
    ProbeConfig,
    run_mink_audit,
    run_tacd,
    run_ts_guessing_mcq,
    run_ts_guessing_qa,
)
from report import (
    build_block,
    build_report,
    config_digest,
    result_records,
    summary_lines,
    trend_lines,
    write_manifest,
    write_record_table,
    write_report,
)

logger = get_logger("audit")

EXIT_OK = 0
EXIT_DATA = 1
EXIT_ENDPOINT = 2

CONFIG_SECTIONS = ("endpoint", "probe", "mock")
PROBE_TEMPLATES = {"ts-mcq": ["ts_mcq"], "ts-qa": ["ts_qa"], "tacd": ["tacd_mcq"], "mink": []}
PROBE_KINDS = {"ts-mcq": "mcq", "ts-qa": "qa", "tacd": "mcq"}


# === CONFIGURATION ===
def load_config(path):
    """YAML file with optional `endpoint`, `probe` and `mock` sections."""
    if path is None:
        return {section: {} for section in CONFIG_SECTIONS}
    try:
        with open(path, encoding="utf-8") as f:
            raw = yaml.safe_load(f) or {}
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}")
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}")

    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    unknown = sorted(set(raw) - set(CONFIG_SECTIONS))
    if unknown:
        raise ConfigError(f"{path}: unknown section(s) {unknown}")
    for section in CONFIG_SECTIONS:
        if not isinstance(raw.get(section) or {}, dict):
            raise ConfigError(f"{path}: section {section!r} must be a mapping")
    return {section: dict(raw.get(section) or {}) for section in CONFIG_SECTIONS}


def build_dataclass(cls, values, section):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown {section} setting(s): {unknown}")
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigError(f"invalid {section} settings: {e}")


def _set(values, key, flag):
    if flag is not None:
        values[key] = flag


def probe_config_from(args, config, probe, languages):
    values = dict(config["probe"])
    values["probe"] = probe
    _set(values, "run_seed", args.seed)
    _set(values, "k_percent", args.k_percent)
    _set(values, "permutation_mode", args.permutation_mode)
    _set(values, "mask_strategy", args.mask_strategy)
    if args.displace_gold:
        values["displace_gold"] = True
    if languages is not None:
        values["languages"] = languages
    values.setdefault("run_seed", 0)
    return build_dataclass(ProbeConfig, values, "probe")


def mock_config_from(config, seed):
    values = dict(config["mock"])
    if "memorized_ids" in values or "contamination_p" in values:
        raise ConfigError("the memorized set comes from --p and --seed, not from the mock section")
    values.setdefault("seed", seed)
    return build_dataclass(MockConfig, values, "mock")


def endpoint_config_from(config, base_url=None, endpoint_id=None):
    values = dict(config["endpoint"])
    _set(values, "base_url", base_url)
    _set(values, "endpoint_id", endpoint_id)
    return build_dataclass(EndpointConfig, values, "endpoint")


# === DATASETS ===
def parse_dataset_args(values):
    """`lang=path` or a bare `path` (language then comes from the records)."""
    specs = []
    for value in values or []:
        label, sep, path = value.partition("=")
        if sep and label and "/" not in label:
            specs.append((label, path))
        else:
            specs.append((None, value))
    if not specs:
        raise ConfigError("at least one --dataset is required")
    return specs


def load_datasets(values):
    datasets = {}
    digests = {}
    for language, path in parse_dataset_args(values):
        items = load_dataset(path, language)
        if not items:
            raise DatasetError("empty dataset", path=path)
        language = language or items[0].language
        if language in datasets:
            raise ConfigError(f"two datasets given for language {language!r}")
        datasets[language] = items
        digests[language] = dataset_digest(path)
    return datasets, digests


def _require_kind(items, kind, probe):
    found = items[0].kind
    if found != kind:
        raise DatasetError(f"{probe} needs a {kind.upper()} dataset, got {found.upper()}")


def _parse_languages(value):
    if value is None:
        return None
    return [lang.strip() for lang in value.split(",") if lang.strip()]


class ProbeInputs:
    """Everything one probe needs: runner arguments, the D(p) population and the mock manifest."""

    def __init__(self, probe, datasets, digests, languages=None, heldout=None):
        self.probe = probe
        self.digests = dict(digests)
        self.heldout = []

        if probe == "tacd":
            languages = languages or list(datasets)
            alignment = align_parallel(datasets, languages)
            if not alignment.instances:
                raise DatasetError(f"no ids shared by all of {languages}")
            _require_kind([alignment.instances[0]], "mcq", probe)
            self.languages = tuple(languages)
            self.population = alignment.instances
            self.manifest_items = [v for inst in alignment.instances for v in inst.views.values()]
            return

        if len(datasets) != 1:
            raise ConfigError(f"{probe} runs on exactly one dataset, got {len(datasets)}")
        language, items = next(iter(datasets.items()))
        if probe in PROBE_KINDS:
            _require_kind(items, PROBE_KINDS[probe], probe)
        self.languages = (language,)
        self.population = items
        self.manifest_items = list(items)

        if probe == "mink":
            if heldout is None:
                raise ConfigError("mink needs --heldout")
            self.heldout = load_dataset(heldout)
            self.digests["heldout"] = dataset_digest(heldout)
            self.manifest_items += self.heldout

    def run(self, client, config, quiet=False):
        if self.probe == "ts-mcq":
            return run_ts_guessing_mcq(self.population, client, config, quiet)
        if self.probe == "ts-qa":
            return run_ts_guessing_qa(self.population, client, config, quiet)
        if self.probe == "mink":
            return run_mink_audit(self.population, self.heldout, client, config, quiet)
        return run_tacd(self.population, client, config, quiet)


# === RUNNING CONDITIONS ===
def run_condition(inputs, probe_config, p, quiet, endpoint=None, mock=None, config=None):
    """
    Audit one condition, against a real endpoint or an in-process mock that
    memorized D(p). Returns (report block, records, endpoint id).
    """
    probe_config = replace(probe_config, condition_p=p)
    server = None
    if mock is not None:
        mock_config = mock.for_condition(inputs.population, p if p is not None else 0)
        server = serve(mock_config, MockManifest(inputs.manifest_items))
        endpoint = endpoint_config_from(config, base_url=server.url, endpoint_id=mock_config.endpoint_id)

    try:
        with ModelClient(endpoint) as client:
            result = inputs.run(client, probe_config, quiet)
    finally:
        if server is not None:
            server.stop()

    records = result_records(result)
    if records and all(r.error is not None for r in records):
        raise EndpointError(f"every instance failed against {endpoint.endpoint_id}: {records[0].error}")
    return build_block(probe_config.probe, result, p), records, endpoint.endpoint_id


def _run_metadata(command, seed, inputs, probe_config, endpoint, mock, endpoint_ids):
    templates = {name: load_template(name).sha256 for name in PROBE_TEMPLATES[inputs.probe]}
    probe_dict = probe_config.to_dict()
    probe_dict["condition_p"] = None
    endpoint_dict = None if mock is not None else endpoint.public_dict()
    mock_dict = None
    if mock is not None:
        mock_dict = mock.to_dict()
        for key in ("memorized_ids", "contamination_p"):
            mock_dict.pop(key)

    settings = {
        "probe": probe_dict,
        "endpoint": endpoint_dict,
        "mock": mock_dict,
        "datasets": inputs.digests,
        "templates": templates,
    }
    return {
        "command": command,
        "seed": seed,
        "config_digest": config_digest(settings),
        "endpoint_ids": endpoint_ids,
        "dataset_digests": inputs.digests,
        "templates": templates,
        "probe_config": probe_dict,
        "endpoint_config": endpoint_dict,
        "mock_config": mock_dict,
    }


def _write_outputs(out, run, blocks, records, started):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    report = build_report(run, blocks)
    write_report(report, out / "report.json")
    write_record_table(records, out / "records.csv")
    write_manifest(
        {
            **run,
            "started_at": started,
            "finished_at": datetime.now(timezone.utc).isoformat(),
        },
        out / "manifest.json",
    )

    for block in report["blocks"]:
        for line in summary_lines(block):
            print(line)
    for line in trend_lines(report.get("trends")):
        print(line)
    print(f"Report written to {out / 'report.json'}")
    return report


def _endpoint_or_mock(args, config, seed):
    if args.mock and args.endpoint:
        raise ConfigError("use either --endpoint or --mock, not both")
    if args.mock:
        return None, mock_config_from(config, seed)
    if not args.endpoint:
        raise ConfigError("an endpoint is required: --endpoint URL or --mock")
    return args.endpoint, None


# === COMMANDS ===
def cmd_validate(args):
    datasets, _ = load_datasets(args.dataset)
    for language, items in datasets.items():
        print(f"{language}: {len(items)} {items[0].kind.upper()} records OK")

    languages = _parse_languages(args.languages)
    if len(datasets) > 1 or languages:
        alignment = align_parallel(datasets, languages)
        print(f"aligned: {len(alignment.instances)} instances, {len(alignment.dropped)} ids dropped")
        for item_id in alignment.dropped[:20]:
            print(f"  dropped {item_id}")
    return EXIT_OK


def cmd_stats(args):
    datasets, _ = load_datasets(args.dataset)
    rows = [corpus_stats(items).to_dict() for items in datasets.values()]
    df = pd.DataFrame(rows).dropna(axis=1, how="all")
    print(df.to_string(index=False))
    if args.out:
        df.to_csv(args.out, index=False)
        print(f"Stats written to {args.out}")
    return EXIT_OK


def cmd_audit(args):
    started = datetime.now(timezone.utc).isoformat()
    config = load_config(args.config)
    datasets, digests = load_datasets(args.dataset)
    inputs = ProbeInputs(args.probe, datasets, digests, _parse_languages(args.languages), args.heldout)

    languages = list(inputs.languages) if args.probe != "mink" else None
    probe_config = probe_config_from(args, config, args.probe, languages)
    seed = probe_config.run_seed
    base_url, mock = _endpoint_or_mock(args, config, seed)
    endpoint = None if mock is not None else endpoint_config_from(config, base_url=base_url)

    p = args.p if args.p is not None else (0 if mock is not None else None)
    block, records, endpoint_id = run_condition(
        inputs, probe_config, p, args.quiet, endpoint=endpoint, mock=mock, config=config
    )

    run = _run_metadata(
        f"audit {args.probe}", seed, inputs, probe_config, endpoint, mock, {str(p): endpoint_id}
    )
    _write_outputs(args.out, run, [block], records, started)
    return EXIT_OK


def cmd_sweep(args):
    started = datetime.now(timezone.utc).isoformat()
    config = load_config(args.config)
    datasets, digests = load_datasets(args.dataset)
    inputs = ProbeInputs(args.probe, datasets, digests, _parse_languages(args.languages), args.heldout)

    languages = list(inputs.languages) if args.probe != "mink" else None
    probe_config = probe_config_from(args, config, args.probe, languages)
    seed = probe_config.run_seed

    levels = list(args.p)
    if len(set(levels)) != len(levels):
        raise ConfigError(f"repeated contamination level in {levels}")
    if args.mock and args.endpoint:
        raise ConfigError("use either --endpoint or --mock, not both")

    if args.mock:
        mock = mock_config_from(config, seed)
        targets = [(p, None) for p in levels]
    else:
        mock = None
        endpoints = args.endpoint or []
        if len(endpoints) != len(levels):
            raise ConfigError(
                f"sweep needs one --endpoint per level: "
                f"{len(levels)} levels, {len(endpoints)} endpoints"
            )
        targets = [(p, endpoint_config_from(config, base_url=url)) for p, url in zip(levels, endpoints)]

    blocks, records, endpoint_ids = [], [], {}
    for p, endpoint in targets:
        logger.info("Sweep condition p=%d", p)
        block, block_records, endpoint_id = run_condition(
            inputs, probe_config, p, args.quiet, endpoint=endpoint, mock=mock, config=config
        )
        blocks.append(block)
        records += block_records
        endpoint_ids[str(p)] = endpoint_id

    endpoint = targets[0][1]
    run = _run_metadata(f"sweep {args.probe}", seed, inputs, probe_config, endpoint, mock, endpoint_ids)
    _write_outputs(args.out, run, blocks, records, started)
    return EXIT_OK


def cmd_mock_serve(args):
    config = load_config(args.config)
    datasets, _ = load_datasets(args.dataset)
    seed = args.seed if args.seed is not None else 0
    mock = mock_config_from(config, seed)

    if len(datasets) > 1:
        population = align_parallel(datasets).instances
    else:
        population = next(iter(datasets.values()))
    items = [item for dataset in datasets.values() for item in dataset]
    if args.heldout:
        items += load_dataset(args.heldout)

    mock = mock.for_condition(population, args.p)
    server = serve(mock, MockManifest(items), host=args.host, port=args.port)
    print(f"Mock endpoint {mock.endpoint_id} serving {len(items)} items on {server.url}")
    print(f"memorized: {len(mock.memorized_ids)} of {len(population)} (p={args.p})")

    stopping = threading.Event()
    for signum in (signal.SIGINT, signal.SIGTERM):
        signal.signal(signum, lambda *_: stopping.set())
    stopping.wait()

    server.stop()
    print(f"Stopped after {server.stats()['requests']} requests")
    return EXIT_OK


def cmd_convert(args):
    if args.format == "squad":
        items = convert_squad(args.source, args.language)
    else:
        items = convert_mmlu_csv(args.source, args.language, args.subject)
    dump_dataset(items, args.out)
    print(f"{len(items)} records written to {args.out}")
    return EXIT_OK


# === ARGUMENTS ===
def _probe_flags(parser):
    parser.add_argument("probe", choices=PROBES)
    parser.add_argument("--dataset", action="append", required=True, help="lang=path or path")
    parser.add_argument("--heldout", help="held-out dataset for mink (nonmember side)")
    parser.add_argument("--languages", help="comma-separated, tacd only (default: dataset order)")
    parser.add_argument("--config", help="YAML with endpoint/probe/mock sections")
    parser.add_argument("--mock", action="store_true", help="audit an in-process mock model")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--k-percent", type=float)
    parser.add_argument("--permutation-mode", choices=PERMUTATION_MODES)
    parser.add_argument("--mask-strategy", choices=MASK_STRATEGIES)
    parser.add_argument("--displace-gold", action="store_true")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--quiet", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="audit", description="Benchmark contamination audits")
    commands = parser.add_subparsers(dest="command", required=True)

    validate = commands.add_parser("validate", help="check datasets and their alignment")
    validate.add_argument("--dataset", action="append", required=True)
    validate.add_argument("--languages")
    validate.set_defaults(handler=cmd_validate)

    stats = commands.add_parser("stats", help="corpus statistics")
    stats.add_argument("--dataset", action="append", required=True)
    stats.add_argument("--out", help="write the table as CSV")
    stats.set_defaults(handler=cmd_stats)

    audit = commands.add_parser("audit", help="run one probe")
    _probe_flags(audit)
    audit.add_argument("--endpoint", help="base URL of the completion endpoint")
    audit.add_argument("--p", type=int, help="contamination level label (mock: memorized share)")
    audit.set_defaults(handler=cmd_audit)

    sweep = commands.add_parser("sweep", help="run one probe at several contamination levels")
    _probe_flags(sweep)
    sweep.add_argument("--endpoint", action="append", help="one per level, in --p order")
    sweep.add_argument("--p", type=int, nargs="+", default=[0, 10, 50, 100])
    sweep.set_defaults(handler=cmd_sweep)

    mock = commands.add_parser("mock-serve", help="serve the synthetic memorizing model")
    mock.add_argument("--dataset", action="append", required=True)
    mock.add_argument("--heldout")
    mock.add_argument("--config")
    mock.add_argument("--p", type=int, default=0)
    mock.add_argument("--seed", type=int)
    mock.add_argument("--host", default="127.0.0.1")
    mock.add_argument("--port", type=int, default=8765)
    mock.set_defaults(handler=cmd_mock_serve)

    convert = commands.add_parser("convert", help="convert SQuAD JSON or MMLU CSV to dataset records")
    convert.add_argument("format", choices=["squad", "mmlu"])
    convert.add_argument("source")
    convert.add_argument("language")
    convert.add_argument("out")
    convert.add_argument("--subject")
    convert.set_defaults(handler=cmd_convert)

    return parser


def main(argv=None):
    load_dotenv()
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except (DatasetError, ConfigError, MetricError) as e:
        logger.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except EndpointError as e:
        logger.error("%s", e)
        print(f"endpoint error: {e}", file=sys.stderr)
        return EXIT_ENDPOINT


if __name__ == "__main__":
    sys.exit(main())
