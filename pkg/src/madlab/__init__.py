"""Desk-scale malware-detection lab.

A transformer-based detector over disassembly tokens fused with hashed
static features (PE imports, printable strings), a single-step
sign-gradient evasion attack against it, and two defenses (adversarial
training, static-feature reduction), all backed by a deterministic
synthetic corpus generator so the full pipeline runs without real malware.
"""

from .asmtok import TokenSequence, Vocabulary, build_vocab, encode, tokenize
from .attack import AdversarialExample, AttackConfig, AttackReport, attack_dataset, fgsm
from .corpus import (
    Label,
    Manifest,
    SampleRecord,
    SynthConfig,
    build_pe_stub,
    generate_synthetic_corpus,
    load_manifest,
    save_manifest,
    stratified_split,
)
from .defense import (
    AdvTrainConfig,
    FeatureReductionMap,
    adversarial_train,
    evaluate_defense,
    reduce_features,
    score_features,
)
from .metrics import MetricsReport, evaluate
from .model import (
    DetectorConfig,
    DetectorModel,
    FusedInput,
    TrainHistory,
    embed,
    encode_records,
    forward,
    init_model,
    load,
    loss_and_input_grad,
    save,
    train,
)
from .staticfeat import (
    HashSpec,
    ImportEntry,
    StaticFeatures,
    extract_strings,
    fnv1a64,
    parse_pe_imports,
    vectorize,
)

__version__ = "0.1.0"
