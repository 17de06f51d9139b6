import argparse
import json
import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

import tensor_core as tc
from backbone import NetworkConfig, forward_network, init_params, load_checkpoint, parameter_count, save_checkpoint
from config import configure_logging, get_default_seed
from errors import ConfigError, ElgsError
from pointcloud_io import PointCloud, S3DIS_CLASS_NAMES, generate_synthetic_scene, load_cloud, load_scene_spec, save_cloud
from training_eval import (ABLATION_VARIANTS, TrainConfig, build_dataset, evaluate, evaluate_cloud,
                           format_ablation_table, network_gradient_check, predict_cloud, run_ablation,
                           run_cross_validation, run_robustness, train, write_report)

logger = logging.getLogger("elgs")

MODEL_FILE = "model.ckpt"
CONFIG_FILE = "config.json"
LOG_FILE = "train_log.jsonl"
GRADCHECK_TOLERANCE = 1e-4


@dataclass
class RunConfig:
    network: NetworkConfig
    train: TrainConfig

    def to_dict(self) -> dict:
        return {"network": self.network.to_dict(), "train": self.train.to_dict()}


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def load_run_config(path: Optional[str] = None, overrides: Sequence[str] = ()) -> RunConfig:
    """
    Carrega {"network": {...}, "train": {...}} e aplica overrides "secao.chave=valor"
    depois do arquivo. Chaves desconhecidas geram ConfigError.
    """
    sections = {"network": {}, "train": {}}
    if path:
        try:
            with open(path, "r", encoding="utf-8") as handle:
                data = json.load(handle)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"Erro ao carregar configuração '{path}': {str(e)}")
        if not isinstance(data, dict):
            raise ConfigError(f"Erro ao carregar configuração '{path}': esperado um objeto JSON")
        for section, values in data.items():
            if section not in sections or not isinstance(values, dict):
                raise ConfigError(f"seção desconhecida na configuração: {section}")
            sections[section].update(values)

    for item in overrides:
        key, sep, raw = item.partition("=")
        section, _, name = key.strip().partition(".")
        if not sep or section not in sections or not name:
            raise ConfigError(f"override inválido '{item}': use network.<chave>=valor ou train.<chave>=valor")
        sections[section][name] = _parse_value(raw)

    try:
        return RunConfig(NetworkConfig.from_dict(sections["network"]), TrainConfig.from_dict(sections["train"]))
    except TypeError as e:
        raise ConfigError(f"Erro ao montar configuração: {str(e)}")


def load_model(model_dir: str):
    run = load_run_config(str(Path(model_dir) / CONFIG_FILE))
    tc.set_precision(run.train.resolved_precision())
    params = load_checkpoint(Path(model_dir) / MODEL_FILE, run.network)
    return run, params


def _print_json(data: dict):
    print(json.dumps(data, indent=2))


# Subcomandos

def cmd_gen_data(args) -> int:
    spec = load_scene_spec(args.spec)
    seed = get_default_seed() if args.seed is None else args.seed
    cloud = generate_synthetic_scene(spec, seed)
    save_cloud(cloud, args.out, args.format)
    logger.info("cena com %d pontos gravada em %s", cloud.n, args.out)
    return 0


def _train_overrides(args) -> List[str]:
    overrides = list(args.set or [])
    if args.lr is not None:
        overrides.append(f"train.learning_rate={args.lr}")
    if args.epochs is not None:
        overrides.append(f"train.epochs={args.epochs}")
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    return overrides


def cmd_train(args) -> int:
    run = load_run_config(args.config, _train_overrides(args))
    cloud = load_cloud(args.data)
    cloud.check_labels(run.network.num_classes)
    dataset = build_dataset(cloud, run.network, run.train.cube_size, run.train.partition,
                            run.train.resolved_seed())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(dataset, run.network, run.train, log_path=out / LOG_FILE, progress=args.progress)
    save_checkpoint(result.params, out / MODEL_FILE)
    saved = RunConfig(result.net_config, replace(run.train, seed=run.train.resolved_seed(),
                                                 precision=run.train.resolved_precision()))
    (out / CONFIG_FILE).write_text(json.dumps(saved.to_dict(), indent=2) + "\n", encoding="utf-8")
    _print_json({"epochs": run.train.epochs, "final": result.history[-1], "order_digest": result.order_digest})
    return 0


def cmd_eval(args) -> int:
    truth = load_cloud(args.data)
    if args.pred:
        predicted = load_cloud(args.pred)
        if predicted.labels is None or truth.labels is None:
            raise ConfigError("eval --pred exige rótulos nas duas nuvens")
        num_classes = args.num_classes or int(max(predicted.labels.max(), truth.labels.max())) + 1
        report = evaluate(predicted.labels, truth.labels, num_classes).to_dict()
    else:
        if not args.model:
            raise ConfigError("eval exige --model ou --pred")
        run, params = load_model(args.model)
        report = evaluate_cloud(params, run.network, truth, run.train).to_dict(
            S3DIS_CLASS_NAMES if run.network.num_classes == len(S3DIS_CLASS_NAMES) else None)
        if args.robustness:
            report["robustness"] = run_robustness(params, run.network, truth, run.train).to_dict()
    if args.out:
        write_report(report, args.out)
    _print_json(report)
    return 0


def cmd_predict(args) -> int:
    run, params = load_model(args.model)
    cloud = load_cloud(args.cloud)
    labels = predict_cloud(params, run.network, cloud, run.train.cube_size, run.train.partition,
                           run.train.resolved_seed())
    save_cloud(cloud.with_labels(labels), args.out, args.format)
    logger.info("predições de %d pontos gravadas em %s", cloud.n, args.out)
    return 0


def cmd_gradcheck(args) -> int:
    network = load_run_config(args.config).network if args.config else None
    result = network_gradient_check(network, seed=args.seed, max_entries_per_param=args.max_entries)
    passed = result.passed(args.tolerance)
    _print_json({"max_rel_error": result.max_rel_error, "checked": result.checked,
                 "worst": None if result.worst is None else [result.worst[0], [int(i) for i in result.worst[1]]],
                 "tolerance": args.tolerance, "passed": passed})
    return 0 if passed else 2


def cmd_ablate(args) -> int:
    run = load_run_config(args.config, list(args.set or []))
    cloud = load_cloud(args.data)
    cloud.check_labels(run.network.num_classes)
    dataset = build_dataset(cloud, run.network, run.train.cube_size, run.train.partition,
                            run.train.resolved_seed())
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    rows = run_ablation(dataset, run.network, run.train, variants, progress=args.progress)
    print(format_ablation_table(rows))
    if args.out:
        write_report({"rows": [row.to_dict() for row in rows]}, args.out)
    return 0


def cmd_crossval(args) -> int:
    run = load_run_config(args.config, list(args.set or []))
    cloud = load_cloud(args.data)
    cloud.check_labels(run.network.num_classes)
    dataset = build_dataset(cloud, run.network, run.train.cube_size, run.train.partition,
                            run.train.resolved_seed())
    report = run_cross_validation(dataset, run.network, run.train, args.folds, progress=args.progress)
    data = report.to_dict(S3DIS_CLASS_NAMES if run.network.num_classes == len(S3DIS_CLASS_NAMES) else None)
    if args.out:
        write_report(data, args.out)
    _print_json(data)
    return 0


def cmd_bench(args) -> int:
    run = load_run_config(args.config, list(args.set or []))
    network = run.network
    seed = run.train.resolved_seed()
    rng = np.random.default_rng(seed)
    cloud = PointCloud(xyz=rng.uniform(0.0, 1.0, (network.block_samples, 3)),
                       attrs=rng.uniform(0.0, 1.0, (network.block_samples, network.in_channels - 3))
                       if network.in_channels > 3 else None)
    params = init_params(network, seed)
    features = cloud.features()
    features[:, :3] -= cloud.xyz.min(axis=0)
    timings = {}
    with tc.no_grad():
        for _ in range(args.repeat):
            forward_network(features, cloud.xyz, network, params, timings=timings)
    stages = {stage: ms / args.repeat for stage, ms in timings.items()}
    _print_json({"points": network.block_samples, "stage_ms": stages, "total_ms": sum(stages.values()),
                 "parameters": parameter_count(params)})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="elgs", description="Segmentação semântica de nuvens de pontos")
    parser.add_argument("--log-level", default=None, help="nível de log (padrão: ELGS_LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="gera uma cena sintética rotulada")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("ascii", "binary"), default="ascii")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("train", help="treina a rede e grava checkpoint e log")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", metavar="SECAO.CHAVE=VALOR")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--progress", action="store_true")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="avalia um modelo ou uma nuvem predita")
    p.add_argument("--model")
    p.add_argument("--data", required=True)
    p.add_argument("--pred")
    p.add_argument("--num-classes", type=int, default=None)
    p.add_argument("--robustness", action="store_true")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("predict", help="grava a nuvem com a coluna de rótulos preditos")
    p.add_argument("--model", required=True)
    p.add_argument("--cloud", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("ascii", "binary"), default="ascii")
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser("gradcheck", help="diferenças finitas na rede mínima")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-entries", type=int, default=0, help="entradas sorteadas por tensor (0 = todas)")
    p.add_argument("--tolerance", type=float, default=GRADCHECK_TOLERANCE)
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("ablate", help="treina as variantes de ablação")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--variants", default=",".join(ABLATION_VARIANTS))
    p.add_argument("--set", action="append", metavar="SECAO.CHAVE=VALOR")
    p.add_argument("--out")
    p.add_argument("--progress", action="store_true")
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("crossval", help="validação cruzada em k partes com média micro")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--folds", type=int, default=6)
    p.add_argument("--set", action="append", metavar="SECAO.CHAVE=VALOR")
    p.add_argument("--out")
    p.add_argument("--progress", action="store_true")
    p.set_defaults(handler=cmd_crossval)

    p = sub.add_parser("bench", help="tempo de forward por estágio e número de parâmetros")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="SECAO.CHAVE=VALOR")
    p.add_argument("--repeat", type=int, default=1)
    p.set_defaults(handler=cmd_bench)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        configure_logging(args.log_level)
        return args.handler(args)
    except (ElgsError, OSError) as e:
        logger.error(str(e))
        print(f"Erro: {str(e)}", file=sys.stderr)
        return 1


if __name__ == '__main__':
    sys.exit(main())
