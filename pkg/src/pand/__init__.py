"""Prompt-calibrated, neighborhood-aware distillation from a frozen vision-language teacher.

Stage one learns shared prompt context tokens so that the frozen text encoder
produces task-adapted class anchors. Stage two freezes those anchors and the
teacher and trains a small student with global alignment losses plus a
structural loss over each sample's most confusable classes.
"""

from .anchors import (ClassVocabulary, ContextTokens, EncoderPair, SemanticAnchors, assemble_prompt,
                      calibration_loss, encode_anchors, load_anchors, make_toy_encoders, run_psc,
                      save_anchors, template_anchors)
from .config import TrainConfig, load_config, toy_config
from .data import DatasetSplit, Sample, load_image_folder, make_toy
from .errors import (ConfigError, DivergenceError, EvaluationError, FormatError, FreezeViolation,
                     IngestionError, NumericError, PandError, ShapeError)
from .eval import (ResultTable, export_embeddings, neighborhood_consistency, run_ablation, run_sweep,
                   top1_accuracy)
from .losses import (LossBreakdown, LossWeights, NeighborhoodSet, RelationDistribution, base_loss,
                     js_divergence, neighborhood_distribution, nsd_loss, select_neighborhood, total_loss)
from .metrics import MetricsLog
from .student import StudentModel, StudentOutput, build_toy_student, load_checkpoint, save_checkpoint, student_forward
from .teacher import Teacher, TeacherOutput, teacher_forward
from .train import PipelineResult, run_nsd_stage, run_pipeline

__version__ = "0.1.0"
