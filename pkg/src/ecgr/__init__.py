"""Emotion-centered generative replay for continual facial expression recognition."""

from .data import (Dataset, DomainSplits, EmotionClass, LabeledImage, WeightedSample,
                   from_gan_range, load_image_dataset, split_dataset, to_gan_range,
                   unify_datasets)
from .gan import (GanConfig, GanTrainLog, critic_loss, generate_samples,
                  generator_loss, gradient_penalty, train_wgangp_for_class)
from .metrics import (AggregateResult, ContinualRunResult, StepMetrics, accuracy,
                      aggregate_replications, emit_report, mean_over_datasets,
                      per_class_f1)
from .models import (ClassifierModel, CriticModel, GeneratorModel, build_classifier,
                     build_critic, build_generator, classifier_predict,
                     count_parameters)
from .pipeline import (PipelinePlan, Strategy, SyntheticCollection, replicate,
                       run_continual_stage, run_offline_stage)
from .qa import QaConfig, QaReport, qa_filter, strip_weights
from .training import TrainConfig, TrainLog, gradient_check_loss, train_classifier, \
    weighted_cross_entropy

__version__ = "0.1.0"
