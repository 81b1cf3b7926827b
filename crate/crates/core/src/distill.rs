//! Mimic learning: a trained teacher labels pairs drawn from unlabeled
//! queries and a student is trained on those labels with the same pairwise
//! hinge objective.
//!
//! Nothing on this path takes relevance judgments. The student sees query
//! text, indexed document text, and teacher scores only.

use crate::corpus::{annotate_with, Annotation, InvertedIndex, PairSampling, PoolScorer, QuerySet};
use crate::error::Result;
use crate::model::{init_params, train, EmbeddingTable, RankModelConfig, RankModelParams};
use crate::scoring::{pairwise_agreement, Agreement, ModelScorer};

/// Labels pairs from `queries` with the teacher's pointwise scores.
///
/// Candidates come from BM25; pairs the teacher scores equally are discarded.
pub fn teacher_annotate(
    teacher: &RankModelParams,
    queries: &QuerySet,
    index: &InvertedIndex,
    sampling: PairSampling,
) -> Result<Annotation> {
    annotate_with(index, queries, sampling, &ModelScorer::new(teacher, index))
}

/// Student-side settings shared by plain and private distillation.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillSettings {
    pub student: RankModelConfig,
    pub sampling: PairSampling,
    pub epochs: usize,
    /// Seeds student initialization and training. Pair sampling uses
    /// `sampling.seed`.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillOutcome {
    pub student: RankModelParams,
    pub loss_trace: Vec<f64>,
    pub instances: usize,
    pub skipped_queries: Vec<String>,
    pub discarded_ties: usize,
    /// Student agreement with the labeler on held-out queries, when given.
    pub fidelity: Option<Agreement>,
}

/// Trains a student from a trained teacher.
pub fn distill(
    teacher: &RankModelParams,
    settings: &DistillSettings,
    unlabeled: &QuerySet,
    index: &InvertedIndex,
    embeddings: Option<&EmbeddingTable>,
    held_out: Option<&QuerySet>,
) -> Result<DistillOutcome> {
    let scorer = ModelScorer::new(teacher, index);
    distill_from(&scorer, &scorer, settings, unlabeled, index, embeddings, held_out)
}

/// Distillation from any pool labeler.
///
/// `labeler` produces training labels; `reference` is what fidelity is
/// measured against. They differ when the labels are noisy.
pub fn distill_from(
    labeler: &dyn PoolScorer,
    reference: &dyn PoolScorer,
    settings: &DistillSettings,
    unlabeled: &QuerySet,
    index: &InvertedIndex,
    embeddings: Option<&EmbeddingTable>,
    held_out: Option<&QuerySet>,
) -> Result<DistillOutcome> {
    let annotation = annotate_with(index, unlabeled, settings.sampling, labeler)?;
    let init = init_params(&settings.student, index.vocabulary(), embeddings, index, settings.seed)?;
    let trained = if annotation.instances.is_empty() {
        crate::model::TrainOutcome {
            params: init,
            loss_trace: Vec::new(),
        }
    } else {
        train(init, &annotation.instances, index, settings.epochs, settings.seed)?
    };
    let fidelity = match held_out {
        Some(qs) => Some(pairwise_agreement(
            reference,
            &ModelScorer::new(&trained.params, index),
            index,
            qs,
            settings.sampling.pool_size,
        )?),
        None => None,
    };
    Ok(DistillOutcome {
        student: trained.params,
        loss_trace: trained.loss_trace,
        instances: annotation.instances.len(),
        skipped_queries: annotation.skipped_queries,
        discarded_ties: annotation.discarded_ties,
        fidelity,
    })
}
