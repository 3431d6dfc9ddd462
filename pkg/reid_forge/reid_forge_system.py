#!/usr/bin/env python3
"""
球員重識別度量學習工具 - 主程序
reid-forge

命令:
- gen:    生成合成聯賽數據集
- train:  訓練嵌入網絡 (隨機 / 層級採樣)
- eval:   按動作評估 mAP / R1
- stats:  批次內樣本對分佈統計
- ablate: 採樣器 × 損失組合 消融網格

結果以 key=value 行 (或 TSV 表) 輸出到標準輸出，日誌輸出到標準錯誤與輸出目錄。
退出碼: 0 成功, 1 用法錯誤, 2 數據錯誤, 3 數值失敗
"""

import argparse
import logging
import sys
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from .common.errors import DatasetError, ReidForgeError, UsageError
from .common.models import Dataset
from .config.config_manager import BatchSpec, ConfigManager, KEY_SCHEMA
from .core.ablation_engine import AblationEngine
from .core.batch_sampler import batch_stats, make_sampler
from .core.dataset_io import load_dataset, load_embeddings, save_dataset
from .core.embedding_model import embed_dataset, load_checkpoint
from .core.evaluator import evaluate_split
from .core.result_collector import ResultCollector, format_kv
from .core.synth_generator import SyntheticLeagueGenerator
from .core.training_engine import TrainingEngine

CONFIG_ECHO = "experiment.conf"


class ReidForgeSystem:
    """reid-forge 主類"""

    def __init__(self, config_path: str = None, overrides: Optional[Dict[str, Any]] = None,
                 output_dir: Optional[str] = None):
        """
        初始化系統

        Args:
            config_path: 配置文件路徑
            overrides: 命令行覆蓋的配置鍵
            output_dir: 輸出目錄 (日誌文件與配置回顯)，為空則只輸出到標準錯誤
        """
        self._setup_logging(output_dir)
        self.config_manager = ConfigManager(config_path, overrides=overrides, check_paths=False)
        self.output_dir = Path(output_dir) if output_dir else None
        self.result_collector = ResultCollector(self.output_dir)

    def _setup_logging(self, output_dir: Optional[str]):
        """設置日誌系統"""
        handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
        if output_dir:
            log_dir = Path(output_dir)
            try:
                log_dir.mkdir(parents=True, exist_ok=True)
            except OSError as e:
                raise DatasetError(f"無法創建輸出目錄 {log_dir}: {e}") from e
            timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
            handlers.append(logging.FileHandler(log_dir / f"reid_forge_{timestamp}.log", encoding='utf-8'))

        logging.basicConfig(
            level=logging.INFO,
            format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
            handlers=handlers,
            force=True,
        )
        self.logger = logging.getLogger(__name__)

    def _echo_config(self):
        if self.output_dir is not None:
            self.config_manager.save_config(self.output_dir / CONFIG_ECHO)

    def _require_dataset_dir(self, path: str) -> Path:
        root = Path(path)
        if not root.is_dir():
            raise DatasetError(f"數據集目錄不存在: {root}")
        return root

    def _dataset_or_generate(self) -> Dataset:
        """配置中有 dataset 則載入，否則生成到 <output_dir>/dataset"""
        train = self.config_manager.get_train_config()
        if train.dataset:
            return load_dataset(self._require_dataset_dir(train.dataset))
        target = (self.output_dir or Path(train.output_dir)) / "dataset"
        self.logger.info(f"未指定數據集，生成合成數據集到: {target}")
        dataset = SyntheticLeagueGenerator(self.config_manager.get_gen_config()).generate()
        save_dataset(dataset, target)
        return dataset

    # ------------------------------------------------------------------
    # 命令

    def generate_dataset(self) -> Dict[str, Any]:
        """生成合成數據集並寫入輸出目錄"""
        if self.output_dir is None:
            raise UsageError("gen 需要 --out 輸出目錄")
        dataset = SyntheticLeagueGenerator(self.config_manager.get_gen_config()).generate()
        save_dataset(dataset, self.output_dir)
        self._echo_config()
        split_counts = {split: 0 for split in ('train', 'valid', 'test')}
        for sample in dataset.samples:
            split_counts[sample.split] += 1
        return {
            'dataset': str(self.output_dir),
            'n_samples': len(dataset),
            'n_actions': len(dataset.actions),
            'n_matches': len(dataset.matches),
            'n_identities': len(set(int(p) for p in dataset.player_ids)),
            'feature_dim': dataset.feature_dim,
            'n_train': split_counts['train'],
            'n_valid': split_counts['valid'],
            'n_test': split_counts['test'],
        }

    def train_model(self) -> Dict[str, Any]:
        """按配置訓練，寫入檢查點與 metrics.tsv"""
        self._echo_config()
        dataset = self._dataset_or_generate()
        config = self.config_manager.get_train_config()
        output_dir = str(self.output_dir) if self.output_dir else config.output_dir
        report = TrainingEngine(config, dataset, output_dir).run()
        metrics_path = ResultCollector(output_dir).write_metrics_log(report)
        summary = report.summary()
        summary['last_checkpoint'] = report.last_checkpoint
        summary['metrics_log'] = str(metrics_path)
        return summary

    def evaluate(self, dataset_path: str, checkpoint: Optional[str] = None,
                 embeddings: Optional[str] = None, metric: Optional[str] = None,
                 split: Optional[str] = None, rankings: Optional[str] = None,
                 top_k: int = 10) -> Dict[str, Any]:
        """
        評估檢查點或外部嵌入

        Args:
            dataset_path: 數據集目錄
            checkpoint: 檢查點文件
            embeddings: 外部嵌入文件 (TSV 或 RF1)，優先於檢查點
            metric: 距離度量，默認取配置
            split: test / valid，為空評估所有非訓練樣本
            rankings: 排名 TSV 輸出路徑
            top_k: 排名表每個查詢保留的條數
        """
        if not checkpoint and not embeddings:
            raise UsageError("eval 需要 --checkpoint 或 --embeddings")
        dataset = load_dataset(self._require_dataset_dir(dataset_path))
        metric = metric or self.config_manager.get_eval_options()['metric']

        if embeddings:
            vectors = load_embeddings(embeddings, dataset)
            source = embeddings
        else:
            net, _ = load_checkpoint(checkpoint)
            if net.config.input_dim != dataset.feature_dim:
                raise DatasetError(
                    f"檢查點輸入維度 {net.config.input_dim} 與數據集特徵維度 {dataset.feature_dim} 不一致")
            vectors = embed_dataset(net, dataset)
            source = checkpoint

        result = evaluate_split(dataset, vectors, metric, split=split)
        self.logger.info(f"評估 {source}: mAP={result.mAP:.1f} R1={result.R1:.1f} "
                         f"({result.n_valid}/{result.n_queries} 個有效查詢)")
        if rankings:
            self.result_collector.write_rankings(result.rankings, rankings, top_k)
        self._echo_config()
        return result.to_dict()

    def sampler_stats(self, dataset_path: str, sampler: str, k: int, m: int,
                      epochs: int, seed: int) -> Dict[str, Any]:
        """多個 epoch 的批次分佈統計"""
        dataset = load_dataset(self._require_dataset_dir(dataset_path))
        spec = BatchSpec(k=k, m=m)
        errors = spec.validate()
        if errors:
            raise UsageError("; ".join(errors))
        batch_sampler = make_sampler(sampler, dataset, spec, seed)
        batches = [batch for epoch in range(epochs) for batch in batch_sampler.iter_epoch(epoch)]
        self.logger.info(f"{sampler} 採樣器: {epochs} 個 epoch 共 {len(batches)} 個批次")
        return batch_stats(batches, dataset).to_dict()

    def run_ablation(self, n_seeds: Optional[int] = None, jobs: Optional[int] = None):
        """執行消融網格，寫入 ablation.tsv 並返回表格"""
        experiment = self.config_manager.get_experiment_config()
        self._echo_config()
        dataset = self._dataset_or_generate()
        output_dir = self.output_dir or Path(experiment.train.output_dir)
        engine = AblationEngine(
            experiment.train, dataset, str(output_dir),
            n_seeds=n_seeds or experiment.ablation_seeds,
            jobs=jobs or experiment.jobs,
        )
        table = engine.run()
        ResultCollector(output_dir).write_ablation_table(table)
        return table


class ReidForgeArgumentParser(argparse.ArgumentParser):
    """用法錯誤以退出碼 1 結束"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: 錯誤: {message}\n")


def parse_overrides(pairs: Sequence[str]) -> Dict[str, str]:
    """解析 --set key=value"""
    overrides = {}
    for pair in pairs or []:
        if '=' not in pair:
            raise UsageError(f"--set 需要 key=value 形式: {pair}")
        key, value = pair.split('=', 1)
        key = key.strip()
        if key not in KEY_SCHEMA:
            raise UsageError(f"未知的配置鍵: {key}")
        overrides[key] = value.strip()
    return overrides


def build_parser() -> argparse.ArgumentParser:
    parser = ReidForgeArgumentParser(
        prog="reid-forge",
        description="球員重識別度量學習工具",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
示例:
  # 生成合成數據集
  reid-forge gen --config experiment.conf --out data/league

  # 訓練 (dataset 為空時自動生成)
  reid-forge train --config experiment.conf --out runs/hier --set sampler=hierarchical

  # 評估
  reid-forge eval --dataset data/league --checkpoint runs/hier/best.ckpt --metric euclidean

  # 批次統計
  reid-forge stats --dataset data/league --sampler hier --k 4 --m 8 --epochs 5 --seed 0

  # 消融網格
  reid-forge ablate --config experiment.conf --out runs/ablation --seeds 5 --jobs 4
        """,
    )
    subparsers = parser.add_subparsers(dest='command', metavar='command', parser_class=ReidForgeArgumentParser)
    subparsers.required = True

    def add_config_args(sub):
        sub.add_argument('--config', type=str, default=None, help='配置文件路徑')
        sub.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                         help='覆蓋配置鍵 (可重複)')

    gen_parser = subparsers.add_parser('gen', help='生成合成數據集')
    add_config_args(gen_parser)
    gen_parser.add_argument('--out', type=str, required=True, help='數據集輸出目錄')

    train_parser = subparsers.add_parser('train', help='訓練嵌入網絡')
    add_config_args(train_parser)
    train_parser.add_argument('--out', type=str, help='輸出目錄 (默認取配置 output_dir)')
    train_parser.add_argument('--dataset', type=str, help='數據集目錄 (覆蓋配置)')

    eval_parser = subparsers.add_parser('eval', help='評估檢查點或外部嵌入')
    add_config_args(eval_parser)
    eval_parser.add_argument('--dataset', type=str, required=True, help='數據集目錄')
    eval_parser.add_argument('--checkpoint', type=str, help='檢查點文件')
    eval_parser.add_argument('--embeddings', type=str, help='外部嵌入文件 (TSV 或 RF1)')
    eval_parser.add_argument('--metric', choices=['euclidean', 'cosine'], help='距離度量')
    eval_parser.add_argument('--split', choices=['test', 'valid', 'all'], default='all', help='評估劃分')
    eval_parser.add_argument('--rankings', type=str, help='逐查詢排名 TSV 輸出路徑')
    eval_parser.add_argument('--top-k', dest='top_k', type=int, default=10, help='排名表每個查詢的條數')
    eval_parser.add_argument('--out', type=str, help='輸出目錄 (日誌與配置回顯)')

    stats_parser = subparsers.add_parser('stats', help='批次分佈統計')
    add_config_args(stats_parser)
    stats_parser.add_argument('--dataset', type=str, required=True, help='數據集目錄')
    stats_parser.add_argument('--sampler', choices=['random', 'hier', 'hierarchical'], default='hier')
    stats_parser.add_argument('--k', type=int, help='每個身份的樣本數')
    stats_parser.add_argument('--m', type=int, help='每批身份數')
    stats_parser.add_argument('--epochs', type=int, default=1, help='統計的 epoch 數')
    stats_parser.add_argument('--seed', type=int, help='採樣種子')

    ablate_parser = subparsers.add_parser('ablate', help='消融網格')
    add_config_args(ablate_parser)
    ablate_parser.add_argument('--out', type=str, help='輸出目錄 (默認取配置 output_dir)')
    ablate_parser.add_argument('--dataset', type=str, help='數據集目錄 (覆蓋配置)')
    ablate_parser.add_argument('--seeds', type=int, help='每個格子的種子數')
    ablate_parser.add_argument('--jobs', type=int, help='並發運行數')

    return parser


def handle_command(args: argparse.Namespace) -> None:
    """執行子命令並把結果寫到標準輸出"""
    overrides = parse_overrides(args.overrides)
    if getattr(args, 'dataset', None) and args.command in ('train', 'ablate'):
        overrides['dataset'] = args.dataset
    out = getattr(args, 'out', None)
    if out and args.command in ('train', 'ablate'):
        overrides['output_dir'] = out

    if args.command in ('train', 'ablate') and not out:
        preview = ConfigManager(args.config, overrides=overrides, check_paths=False)
        out = preview.get_train_config().output_dir

    system = ReidForgeSystem(args.config, overrides=overrides, output_dir=out)

    if args.command == 'gen':
        print("\n".join(format_kv(system.generate_dataset())))

    elif args.command == 'train':
        print("\n".join(format_kv(system.train_model())))

    elif args.command == 'eval':
        record = system.evaluate(
            args.dataset, checkpoint=args.checkpoint, embeddings=args.embeddings,
            metric=args.metric, split=None if args.split == 'all' else args.split,
            rankings=args.rankings, top_k=args.top_k,
        )
        print("\n".join(format_kv(record)))

    elif args.command == 'stats':
        train = system.config_manager.get_train_config()
        record = system.sampler_stats(
            args.dataset, args.sampler,
            k=args.k if args.k is not None else train.batch.k,
            m=args.m if args.m is not None else train.batch.m,
            epochs=args.epochs,
            seed=args.seed if args.seed is not None else train.seed,
        )
        print("\n".join(format_kv(record)))

    elif args.command == 'ablate':
        table = system.run_ablation(n_seeds=args.seeds, jobs=args.jobs)
        sys.stdout.write(system.result_collector.render_table(table))


def main(argv: Optional[Sequence[str]] = None) -> int:
    """主程序入口"""
    parser = build_parser()
    args = parser.parse_args(argv)
    logger = logging.getLogger("reid_forge")

    try:
        handle_command(args)
        return 0
    except ReidForgeError as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"錯誤: {e}", file=sys.stderr)
        return e.exit_code
    except KeyboardInterrupt:
        print("\n用戶中斷執行", file=sys.stderr)
        return 1
    except Exception as e:
        logger.exception(f"系統錯誤: {e}")
        print(f"系統錯誤: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
