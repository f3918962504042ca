"""Feature synthesis for label-only classes through a frozen text encoder."""
from .core import (LossBreakdown, PromptConfig, ShipGenerator, TrainConfig, TrainingError, assemble_prompt,
                   elbo_loss, reconstruct, reparameterize, synthesize, train_generator, vae_encode)
from .datastore import (ClassSplit, ClassVocabulary, DataError, DatasetManifest, LabeledFeatureSet,
                        few_shot_indices, load_manifest, read_feature_store, sample_few_shot, split_base_new,
                        write_feature_store, write_manifest)
from .encoders import DualEncoder, PromptTemplate, ToyDualEncoder, class_text_feature, make_toy_encoder
from .finetuners import (AdapterHead, CacheHead, HeadTrainConfig, PromptTunerHead, UnscorableClassError,
                         ZeroShotHead, build_cache_head, fit_adapter, fit_prompt_tuner, load_head,
                         zero_shot_logits)
from .interpret import Interpretation, interpret_instance, nearest_words
from .protocols import (EvalReport, ProtocolConfig, ToyWorldConfig, build_toy_world, harmonic_mean,
                        run_base_to_new, run_cross_dataset, run_generalized_setting, run_gzsl)

__version__ = "0.1.0"
