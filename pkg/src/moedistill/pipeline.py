"""End-to-end experiment pipeline: teacher fine-tuning, importance scoring,
expert adaptation, distillation, evaluation and inference benchmarking.

Every stage is a pure function of (config, seed, input artifacts); repeated
runs write identical metrics files. Wall-clock timings live only in the
bench report.
"""

from __future__ import annotations

import copy
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import (load_checkpoint, read_header, save_checkpoint,
                         importance_json_digest)
from .data import (Dataset, Vocab, build_vocab, encode_dataset, gen_synthetic_task,
                   load_tsv, pad_batch)
from .distill import DistillConfig, evaluate_accuracy, train_student, train_teacher
from .importance import ImportanceTable, accumulate_importance
from .model import (EncoderModel, ModelConfig, MoEConfig, effective_param_count,
                    flops_breakdown, total_param_count)
from .moe import (ADAPT_IMPORTANCE, GATE, RoutingTable, adapt_ffn, build_routing,
                  routing_loads)


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: dict = field(default_factory=dict)
    teacher_train: dict = field(default_factory=dict)
    student_train: dict = field(default_factory=dict)
    data: dict = field(default_factory=lambda: {"synthetic": {}})
    routing: str = "hash_random"
    adaptation: str = ADAPT_IMPORTANCE
    num_experts: int = 4
    shared_dim: int = 0
    seed: int = 0
    out_dir: str = "runs/out"

    @classmethod
    def from_json_file(cls, path: str) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
        return cls(**doc)

    def model_config(self, vocab_size: int, num_labels: int,
                     moe: MoEConfig | None = None) -> ModelConfig:
        d = dict(self.model)
        d.setdefault("embed_dim", 64)
        d.setdefault("ffn_hidden", 256)
        d.setdefault("num_layers", 4)
        d.setdefault("num_heads", 4)
        d.setdefault("max_seq_len", 64)
        d["vocab_size"] = vocab_size
        d["num_labels"] = num_labels
        d["moe"] = None
        cfg = ModelConfig.from_dict(d)
        cfg.moe = moe
        return cfg

    def moe_config(self, ffn_hidden: int) -> MoEConfig:
        return MoEConfig(num_experts=self.num_experts,
                         expert_dim=ffn_hidden // self.num_experts,
                         shared_dim=self.shared_dim,
                         routing=self.routing)

    def distill_config(self, which: str) -> DistillConfig:
        base = self.teacher_train if which == "teacher" else self.student_train
        cfg = DistillConfig.from_dict(dict(base)) if base else DistillConfig()
        cfg.seed = self.seed
        return cfg


@dataclass
class PreparedData:
    train: Dataset
    eval: Dataset
    vocab: Vocab
    num_labels: int


def prepare_data(cfg: RunConfig) -> PreparedData:
    """Build datasets and vocabulary from the synthetic spec or TSV paths."""
    spec = cfg.data
    if "synthetic" in spec:
        syn = dict(spec["synthetic"])
        syn.setdefault("seed", cfg.seed)
        task = gen_synthetic_task(**syn)
        train_pairs, eval_pairs = task.train, task.eval
        corpus = task.corpus
        num_labels = task.n_classes
    elif "train_tsv" in spec:
        train_pairs = load_tsv(spec["train_tsv"], spec.get("has_header", False))
        eval_pairs = load_tsv(spec["eval_tsv"], spec.get("has_header", False))
        corpus = [t for t, _ in train_pairs]
        labels = {y for _, y in train_pairs}
        for _, y in eval_pairs:
            if y not in labels:
                raise ConfigError(f"eval label {y} never seen in training data")
        num_labels = max(labels) + 1
    else:
        raise ConfigError("data spec needs either 'synthetic' or 'train_tsv'")

    vocab = build_vocab(corpus, min_freq=spec.get("min_freq", 1))
    max_len = cfg.model.get("max_seq_len", 64)
    return PreparedData(
        train=encode_dataset(train_pairs, vocab, max_len, num_labels),
        eval=encode_dataset(eval_pairs, vocab, max_len, num_labels),
        vocab=vocab, num_labels=num_labels)


def adapt_model(teacher: EncoderModel, table: ImportanceTable, moe: MoEConfig,
                vocab_freqs: np.ndarray, seed: int,
                mode: str = ADAPT_IMPORTANCE) -> EncoderModel:
    """Build the MoE student from a dense teacher.

    Attention, embedding and head parameters are copied; each FFN is split
    into experts by the importance ordering. Hash strategies share one
    token→expert table across layers; the gate gets its own weight per
    layer.
    """
    cfg = copy.deepcopy(teacher.cfg)
    cfg.moe = moe
    student = EncoderModel(cfg, seed=seed)
    src = teacher.named_parameters()
    dst = student.named_parameters()
    for name, t in dst.items():
        if name in src:
            t.data = src[name].data.copy()

    ordering = table.ordering()
    rng = np.random.default_rng(seed)
    shared_hash: RoutingTable | None = None
    if moe.routing != GATE:
        shared_hash = build_routing(moe.routing, vocab_freqs, moe.num_experts,
                                    seed, cfg.embed_dim)
    for l, (s_layer, t_layer) in enumerate(zip(student.layers, teacher.layers)):
        ffn = t_layer.ffn
        s_layer.ffn = adapt_ffn(ffn.w1.data, ffn.b1.data, ffn.w2.data, ffn.b2.data,
                                ordering[l], moe.num_experts, moe.shared_dim,
                                mode=mode, rng=rng)
        if moe.routing == GATE:
            s_layer.routing = build_routing(GATE, None, moe.num_experts,
                                            seed + l, cfg.embed_dim)
        else:
            s_layer.routing = shared_hash
    return student


def bench_inference(model: EncoderModel, dataset: Dataset, repeats: int = 5,
                    seq_len: int | None = None, warmup: int = 2) -> dict:
    """Examples/second at batch size 1 plus the analytic cost numbers.

    Timing is the median over ``repeats`` passes after ``warmup`` passes;
    every example is padded to the same fixed sequence length.
    """
    seq_len = seq_len or model.cfg.max_seq_len
    batches = []
    for ex in dataset.examples:
        ids, mask, _ = pad_batch([ex])
        fixed_ids = np.zeros((1, seq_len), dtype=np.int64)
        fixed_mask = np.zeros((1, seq_len))
        n = min(seq_len, ids.shape[1])
        fixed_ids[0, :n] = ids[0, :n]
        fixed_mask[0, :n] = mask[0, :n]
        batches.append((fixed_ids, fixed_mask))

    def one_pass() -> float:
        start = time.perf_counter()
        with T.no_grad():
            for ids, mask in batches:
                model.forward(ids, mask, training=False)
        return time.perf_counter() - start

    for _ in range(warmup):
        one_pass()
    times = sorted(one_pass() for _ in range(max(1, repeats)))
    median = times[len(times) // 2]
    return {
        "examples_per_second": len(batches) / median,
        "median_seconds": median,
        "repeats": repeats,
        "seq_len": seq_len,
        "effective_params": effective_param_count(model.cfg),
        "total_params": total_param_count(model.cfg),
        "flops_per_token": flops_breakdown(model.cfg, seq_len),
    }


# -- pipeline stages --------------------------------------------------------


def _write(path: str, text: str):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _metrics_path(out_dir: str) -> str:
    return os.path.join(out_dir, "metrics.jsonl")


def _append_metrics(out_dir: str, records: list[dict]):
    os.makedirs(out_dir, exist_ok=True)
    with open(_metrics_path(out_dir), "a", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def stage_train_teacher(cfg: RunConfig, data: PreparedData) -> str:
    model_cfg = cfg.model_config(data.vocab.size, data.num_labels)
    teacher = EncoderModel(model_cfg, seed=cfg.seed)
    records: list[dict] = []
    train_teacher(teacher, data.train, cfg.distill_config("teacher"),
                  eval_set=data.eval, metrics_sink=records)
    os.makedirs(cfg.out_dir, exist_ok=True)
    vocab_path = os.path.join(cfg.out_dir, "vocab.json")
    _write(vocab_path, data.vocab.to_json())
    path = os.path.join(cfg.out_dir, "teacher.ckpt")
    save_checkpoint(teacher, path, vocab_file="vocab.json")
    _append_metrics(cfg.out_dir, records)
    return path


def stage_importance(cfg: RunConfig, data: PreparedData) -> str:
    teacher = load_checkpoint(os.path.join(cfg.out_dir, "teacher.ckpt"))
    table = accumulate_importance(teacher, data.train)
    path = os.path.join(cfg.out_dir, "importance.json")
    _write(path, table.to_json())
    return path

def stage_adapt(cfg: RunConfig, data: PreparedData) -> str:
    teacher = load_checkpoint(os.path.join(cfg.out_dir, "teacher.ckpt"))
    imp_path = os.path.join(cfg.out_dir, "importance.json")
    if not os.path.exists(imp_path):
        raise ConfigError(f"missing importance table {imp_path}; run the "
                          "importance stage first")
    with open(imp_path, encoding="utf-8") as fh:
        imp_text = fh.read()
    table = ImportanceTable.from_json(imp_text, len(data.train))
    moe = cfg.moe_config(teacher.cfg.ffn_hidden)
    student = adapt_model(teacher, table, moe, data.vocab.freqs, cfg.seed,
                          mode=cfg.adaptation)
    path = os.path.join(cfg.out_dir, "student_init.ckpt")
    save_checkpoint(student, path, vocab_file="vocab.json",
                    importance_digest=importance_json_digest(imp_text))
    return path


def stage_distill(cfg: RunConfig, data: PreparedData) -> str:
    teacher = load_checkpoint(os.path.join(cfg.out_dir, "teacher.ckpt"))
    student = load_checkpoint(os.path.join(cfg.out_dir, "student_init.ckpt"))
    records: list[dict] = []
    train_student(student, teacher, data.train, cfg.distill_config("student"),
                  eval_set=data.eval, metrics_sink=records)
    path = os.path.join(cfg.out_dir, "student.ckpt")
    header = read_header(os.path.join(cfg.out_dir, "student_init.ckpt"))
    save_checkpoint(student, path, vocab_file="vocab.json",
                    importance_digest=header.get("importance_digest"))
    _append_metrics(cfg.out_dir, records)
    return path


def stage_eval(cfg: RunConfig, data: PreparedData, which: str = "student") -> dict:
    path = os.path.join(cfg.out_dir, f"{which}.ckpt")
    model = load_checkpoint(path)
    acc = evaluate_accuracy(model, data.eval)
    report = {"checkpoint": f"{which}.ckpt", "eval_acc": acc,
              "n_examples": len(data.eval)}
    _write(os.path.join(cfg.out_dir, f"eval_{which}.json"),
           json.dumps(report, sort_keys=True) + "\n")
    return report


def stage_bench(cfg: RunConfig, data: PreparedData, repeats: int = 5) -> dict:
    teacher = load_checkpoint(os.path.join(cfg.out_dir, "teacher.ckpt"))
    student = load_checkpoint(os.path.join(cfg.out_dir, "student.ckpt"))
    subset = Dataset(data.eval.examples[:32], data.eval.num_labels)
    report = {
        "dense": bench_inference(teacher, subset, repeats=repeats),
        "moe": bench_inference(student, subset, repeats=repeats),
    }
    if student.layers and student.layers[0].routing is not None \
            and student.layers[0].routing.table is not None:
        loads = routing_loads(student.layers[0].routing.table, data.vocab.freqs,
                              cfg.num_experts)
        report["routing_loads"] = [float(x) for x in loads]
    _write(os.path.join(cfg.out_dir, "bench.json"),
           json.dumps(report, sort_keys=True, indent=2) + "\n")
    return report


def run_pipeline(cfg: RunConfig, bench_repeats: int = 5) -> dict:
    """Chain all stages; returns the final eval + bench summary."""
    metrics = _metrics_path(cfg.out_dir)
    if os.path.exists(metrics):
        os.remove(metrics)
    data = prepare_data(cfg)
    stage_train_teacher(cfg, data)
    stage_importance(cfg, data)
    stage_adapt(cfg, data)
    stage_distill(cfg, data)
    teacher_eval = stage_eval(cfg, data, "teacher")
    student_eval = stage_eval(cfg, data, "student")
    bench = stage_bench(cfg, data, repeats=bench_repeats)
    return {"teacher": teacher_eval, "student": student_eval, "bench": bench}
