//! Persona-agent ensemble: one independent voting round, an optional debate
//! round, and majority voting with ties resolved to the more acute level.

use std::fmt;

use futures::future::join_all;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{ask_for_level, BackendError, TemplateError, TemplateId};
use crate::domain::{ClinicalVignette, EsiLevel};
use crate::pipelines::{PipelineContext, Stage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Persona {
    SafetyFirst,
    GuidelineStrict,
    ResourceAware,
    RedFlagSentinel,
}

impl Persona {
    /// Nested order: the 3-agent ensemble is the first three.
    pub const ALL: [Persona; 4] = [
        Persona::SafetyFirst,
        Persona::GuidelineStrict,
        Persona::ResourceAware,
        Persona::RedFlagSentinel,
    ];

    pub fn ensemble(n_agents: usize) -> &'static [Persona] {
        &Self::ALL[..n_agents.min(Self::ALL.len())]
    }

    pub fn template(self) -> TemplateId {
        match self {
            Persona::SafetyFirst => TemplateId::AgentSafetyFirst,
            Persona::GuidelineStrict => TemplateId::AgentGuidelineStrict,
            Persona::ResourceAware => TemplateId::AgentResourceAware,
            Persona::RedFlagSentinel => TemplateId::AgentRedFlagSentinel,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Persona::SafetyFirst => "safety-first",
            Persona::GuidelineStrict => "guideline-strict",
            Persona::ResourceAware => "resource-aware",
            Persona::RedFlagSentinel => "red-flag sentinel",
        }
    }
}

impl fmt::Display for Persona {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentVote {
    pub persona: Persona,
    pub level: EsiLevel,
    pub rationale: String,
}

/// One persona's slot in a round; `level` is `None` when the agent never
/// produced a parseable level.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteEntry {
    pub persona: Persona,
    pub level: Option<EsiLevel>,
    pub rationale: String,
}

/// Votes from every round, in round order, as stored on prediction records.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleTrace {
    pub n_agents: usize,
    pub rounds: Vec<Vec<VoteEntry>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleOptions {
    pub n_agents: usize,
    pub rounds: usize,
}

impl EnsembleOptions {
    pub fn validate(&self) -> Result<(), EnsembleError> {
        if !(3..=4).contains(&self.n_agents) {
            return Err(EnsembleError::InvalidOptions(format!("n_agents must be 3 or 4, got {}", self.n_agents)));
        }
        if !(1..=2).contains(&self.rounds) {
            return Err(EnsembleError::InvalidOptions(format!("rounds must be 1 or 2, got {}", self.rounds)));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("no votes to tally")]
    EmptyVotes,
    #[error("every persona failed to produce a parseable level")]
    RoundFailure,
    #[error("invalid ensemble options: {0}")]
    InvalidOptions(String),
    #[error("stage {stage} failed: {source}")]
    Backend {
        stage: Stage,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// Most frequent level; among levels tied for the top count, the lowest
/// (most acute) value wins.
pub fn majority_vote(votes: &[EsiLevel]) -> Result<EsiLevel, EnsembleError> {
    let mut counts = [0usize; 6];
    for v in votes {
        counts[v.value() as usize] += 1;
    }
    let max = *counts.iter().max().unwrap_or(&0);
    if max == 0 {
        return Err(EnsembleError::EmptyVotes);
    }
    EsiLevel::ALL
        .into_iter()
        .find(|l| counts[l.value() as usize] == max)
        .ok_or(EnsembleError::EmptyVotes)
}

fn rationale_of(text: &str) -> String {
    let lower = text.to_lowercase();
    match lower.find("rationale:") {
        Some(i) => text[i + "rationale:".len()..].trim().to_string(),
        None => text.trim().to_string(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentOutcome {
    pub persona: Persona,
    pub vote: Option<AgentVote>,
    pub raw_text: String,
}

impl AgentOutcome {
    fn entry(&self) -> VoteEntry {
        VoteEntry {
            persona: self.persona,
            level: self.vote.as_ref().map(|v| v.level),
            rationale: self.vote.as_ref().map(|v| v.rationale.clone()).unwrap_or_default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundResult {
    pub outcomes: Vec<AgentOutcome>,
    pub latency_seconds: f64,
}

impl RoundResult {
    pub fn votes(&self) -> Vec<AgentVote> {
        self.outcomes.iter().filter_map(|o| o.vote.clone()).collect()
    }
}

/// Independent persona completions, issued concurrently; output order
/// matches `personas`.
pub async fn run_agents_round(
    ctx: &PipelineContext,
    vignette: &ClinicalVignette,
    personas: &[Persona],
) -> Result<RoundResult, EnsembleError> {
    if personas.is_empty() {
        return Err(EnsembleError::EmptyVotes);
    }
    let calls = personas.iter().map(|&persona| async move {
        let req = ctx.request(persona.template(), &[("vignette", &vignette.text)], &vignette.text)?;
        let answer = ask_for_level(ctx.backend.as_ref(), req)
            .await
            .map_err(|source| EnsembleError::Backend { stage: Stage::AgentRound, source })?;
        Ok::<_, EnsembleError>((persona, answer))
    });
    let mut outcomes = Vec::with_capacity(personas.len());
    let mut latency = 0.0;
    for result in join_all(calls).await {
        let (persona, answer) = result?;
        latency += answer.latency_seconds;
        let vote = answer.level.map(|level| AgentVote { persona, level, rationale: rationale_of(&answer.text) });
        outcomes.push(AgentOutcome { persona, vote, raw_text: answer.text });
    }
    if outcomes.iter().all(|o| o.vote.is_none()) {
        return Err(EnsembleError::RoundFailure);
    }
    Ok(RoundResult { outcomes, latency_seconds: latency })
}

fn peer_opinions(prior: &[AgentVote], own: usize) -> String {
    let lines: Vec<String> = prior
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != own)
        .map(|(_, v)| format!("- {}: ESI {}. Rationale: {}", v.persona, v.level, v.rationale))
        .collect();
    if lines.is_empty() {
        "(no other agents responded)".to_string()
    } else {
        lines.join("\n")
    }
}

/// Each agent sees the other agents' levels and rationales and may revise.
/// An agent whose revision cannot be parsed keeps its prior vote.
pub async fn debate_round(
    ctx: &PipelineContext,
    vignette: &ClinicalVignette,
    prior: &[AgentVote],
) -> Result<RoundResult, EnsembleError> {
    let calls = prior.iter().enumerate().map(|(i, vote)| async move {
        let own_level = vote.level.to_string();
        let peers = peer_opinions(prior, i);
        let req = ctx.request(
            TemplateId::DebateRevision,
            &[
                ("persona", vote.persona.label()),
                ("vignette", &vignette.text),
                ("own_level", &own_level),
                ("own_rationale", &vote.rationale),
                ("peer_opinions", &peers),
            ],
            &vignette.text,
        )?;
        let answer = ask_for_level(ctx.backend.as_ref(), req)
            .await
            .map_err(|source| EnsembleError::Backend { stage: Stage::Debate, source })?;
        Ok::<_, EnsembleError>((vote, answer))
    });
    let mut outcomes = Vec::with_capacity(prior.len());
    let mut latency = 0.0;
    for result in join_all(calls).await {
        let (prior_vote, answer) = result?;
        latency += answer.latency_seconds;
        let vote = match answer.level {
            Some(level) => AgentVote { persona: prior_vote.persona, level, rationale: rationale_of(&answer.text) },
            None => prior_vote.clone(),
        };
        outcomes.push(AgentOutcome { persona: vote.persona, vote: Some(vote), raw_text: answer.text });
    }
    Ok(RoundResult { outcomes, latency_seconds: latency })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleOutcome {
    pub predicted: EsiLevel,
    pub trace: EnsembleTrace,
    pub final_round: Vec<AgentOutcome>,
    pub latency_seconds: f64,
}

impl EnsembleOutcome {
    pub fn raw_text(&self) -> String {
        self.final_round
            .iter()
            .map(|o| format!("[{}] {}", o.persona, o.raw_text.trim()))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Round one, an optional debate round, then a majority vote over the final
/// votes. Personas absent from round one stay absent and are not tallied.
pub async fn run_ensemble(
    ctx: &PipelineContext,
    vignette: &ClinicalVignette,
    opts: EnsembleOptions,
) -> Result<EnsembleOutcome, EnsembleError> {
    opts.validate()?;
    let personas = Persona::ensemble(opts.n_agents);
    let first = run_agents_round(ctx, vignette, personas).await?;
    let mut latency = first.latency_seconds;
    let mut rounds = vec![first.outcomes.iter().map(AgentOutcome::entry).collect::<Vec<_>>()];
    let mut final_round = first.outcomes.clone();

    if opts.rounds == 2 {
        let debate = debate_round(ctx, vignette, &first.votes()).await?;
        latency += debate.latency_seconds;
        let mut revised = debate.outcomes.into_iter();
        final_round = first
            .outcomes
            .iter()
            .map(|o| match o.vote {
                Some(_) => revised.next().expect("one revision per present vote"),
                None => o.clone(),
            })
            .collect();
        rounds.push(final_round.iter().map(AgentOutcome::entry).collect());
    }

    let levels: Vec<EsiLevel> = final_round.iter().filter_map(|o| o.vote.as_ref().map(|v| v.level)).collect();
    let predicted = majority_vote(&levels)?;
    Ok(EnsembleOutcome {
        predicted,
        trace: EnsembleTrace { n_agents: opts.n_agents, rounds },
        final_round,
        latency_seconds: latency,
    })
}
