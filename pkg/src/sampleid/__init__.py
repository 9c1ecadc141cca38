"""sampleid: music sample identification via GNN fingerprints, a
cross-attention match classifier, and two-stage IVF-PQ retrieval."""

__version__ = "0.1.0"

from .audio import MelConfig, MelSpec, Waveform, load_audio, mel_spectrogram, segment
from .classifier import MhcaParams, classify, cross_attention
from .encoder import (EncoderConfig, EncoderParams, Fingerprint, KnnGraph,
                      NodeMatrix, PointSet, build_knn_graph, encoder_forward,
                      to_points)
from .evaluation import (AnnotationRecord, average_precision, compute_hit_rates,
                         compute_map, parse_annotations, stratify,
                         write_annotations)
from .index import IvfPqConfig, IvfPqIndex, exact_search, load_index
from .pairgen import (AugRanges, StemSet, TrainPair, aug1, aug2, generate_pair,
                      partition_stems)
from .retrieval import (ReferenceDb, RetrievalResult, build_index_from_db,
                        ingest_reference, refine_and_rank, retrieve_candidates,
                        run_query)
from .training import (Adam, auroc, bce_loss, cosine_lr, gradient_suite,
                       mine_hard_negatives, nt_xent_loss, train_classifier,
                       train_encoder)
from .autodiff import Tensor, grad_check
