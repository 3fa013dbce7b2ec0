//! The federated round loop.
//!
//! Each training round `l`: sample clients, broadcast the global model and
//! the server's estimates, run local updates (optionally in parallel),
//! average the uploads, refresh the context matrix from the uploaded
//! embeddings and re-measure class rectification on the new global model.
//! Round `r ≥ 1` in the run log is the evaluation after training round
//! `l = r − 1`; round 0 evaluates the initial model.

mod audit;
mod config;
mod optim;

pub use audit::{Access, AuditLog, AuditSink, Party};
pub use config::{AceSettings, ModelSettings, RunConfig, Toggles};
pub use optim::Adam;

use std::sync::Arc;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ace::{self, AceContextMatrix, Mode};
use crate::autodiff::Graph;
use crate::cro;
use crate::data::{self, ClientData, Dataset, FederatedData, SesSet};
use crate::dmr::Schedule;
use crate::error::{Error, Result};
use crate::fau;
use crate::metrics::{self, RoundRecord};
use crate::model::{self, ActivationCapture, ModelConfig, ModelParams, ParamGroup};
use crate::rng::{self, purpose, StreamRng};
use crate::tensor::Tensor;

const EVAL_CHUNK: usize = 256;

/// One client's private state.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub data: ClientData,
    /// Latest local model, including the client's own context embeddings.
    pub params: ModelParams,
    /// Base of the client's per-round random streams.
    pub seed: u64,
    pub d_cka: f64,
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub global: ModelParams,
    pub ses: SesSet,
    pub cr_tilde: Vec<f64>,
    pub d_cka: Vec<f64>,
    /// Stacked client embeddings; row `i` is only written from client `i`'s upload.
    pub context: Option<AceContextMatrix>,
    /// Next training round.
    pub round: usize,
}

/// What a selected client receives.
pub struct Broadcast<'a> {
    pub round: usize,
    pub global: &'a ModelParams,
    pub cr_tilde: &'a [f64],
    pub ses: &'a SesSet,
    /// Global stage activations on the monitoring set, sent on alignment rounds.
    pub global_capture: Option<&'a ActivationCapture>,
    pub context: Option<&'a AceContextMatrix>,
    pub schedule: Schedule,
    pub tau: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone)]
pub struct Upload {
    pub client_id: usize,
    pub params: ModelParams,
    pub samples: usize,
    /// Divergence measured at this round's alignment step, if there was one.
    pub d_cka: Option<f64>,
    /// Mean training loss of each local epoch.
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub records: Vec<RoundRecord>,
    pub cloud_confusion: Vec<Vec<usize>>,
    /// `None` for clients whose test split is empty.
    pub client_confusion: Vec<Option<Vec<Vec<usize>>>>,
    pub duration_secs: f64,
}

impl RunReport {
    pub fn final_record(&self) -> &RoundRecord {
        self.records.last().expect("at least the initial record")
    }
}

/// Uniform sample of `k` distinct ids out of `0..clients`, sorted.
pub fn select_clients(clients: usize, k: usize, rng: &mut StreamRng) -> Result<Vec<usize>> {
    if k == 0 || k > clients {
        return Err(Error::invalid("select_clients", format!("cannot pick {k} of {clients} clients")));
    }
    if k == clients {
        return Ok((0..clients).collect());
    }
    let mut ids = index::sample(rng, clients, k).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Normalised averaging weights `n_k / Σ n`.
pub fn aggregation_weights(samples: &[usize]) -> Result<Vec<f64>> {
    let total: usize = samples.iter().sum();
    if total == 0 {
        return Err(Error::invalid("aggregate", "uploads carry no samples"));
    }
    Ok(samples.iter().map(|&n| n as f64 / total as f64).collect())
}

/// Sample-weighted average of the uploaded backbones and heads.
///
/// Uploads are combined in client-id order as a running mean, so identical
/// uploads reproduce their common value exactly. Context embeddings are not
/// averaged; the result carries zeros in their place.
pub fn aggregate(uploads: &[Upload]) -> Result<ModelParams> {
    let mut order: Vec<&Upload> = uploads.iter().filter(|u| u.samples > 0).collect();
    order.sort_by_key(|u| u.client_id);
    let first = order.first().ok_or_else(|| Error::invalid("aggregate", "no upload with samples"))?;
    if order.iter().any(|u| !u.params.same_shapes(&first.params)) {
        return Err(Error::shape("aggregate", "uploads differ in parameter shapes"));
    }
    let mut out = first.params.clone();
    let mut seen = first.samples as f64;
    for u in &order[1..] {
        seen += u.samples as f64;
        let f = u.samples as f64 / seen;
        for ((group, dst), (_, src)) in out.entries_mut().into_iter().zip(u.params.entries()) {
            if group == ParamGroup::Embedding {
                continue;
            }
            for (m, &x) in dst.data_mut().iter_mut().zip(src.data()) {
                *m += f * (x - *m);
            }
        }
    }
    for (group, t) in out.entries_mut() {
        if group == ParamGroup::Embedding {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(out)
}

/// The global model with `own`'s context embeddings substituted in.
fn adopt_global(global: &ModelParams, own: &ModelParams) -> ModelParams {
    let mut out = global.clone();
    for (dst, src) in out.ace.iter_mut().zip(&own.ace) {
        dst.context_embedding = src.context_embedding.clone();
    }
    out
}

fn record(audit: Option<&Arc<dyn AuditSink>>, by: Party, access: Access) {
    if let Some(a) = audit {
        a.record(by, access);
    }
}

/// Local work of one selected client: alignment or overwrite, then
/// `local_epochs` passes of mini-batch training on the rectified loss.
pub fn client_update(
    client: &ClientState,
    b: &Broadcast<'_>,
    cfg: &RunConfig,
    model_cfg: &ModelConfig,
    audit: Option<&Arc<dyn AuditSink>>,
) -> Result<Upload> {
    let me = Party::Client(client.client_id);
    let own_ctx = b.context.map(|c| c.with_owner(Some(client.client_id)));
    let align = cfg.toggles.fau && b.round.is_multiple_of(cfg.fau_period);
    let (mut params, d_cka) = if align {
        let global_capture =
            b.global_capture.ok_or_else(|| Error::invalid("client_update", "alignment round without global activations"))?;
        record(audit, me, Access::Ses);
        let (_, own_capture) =
            model::forward(model_cfg, &client.params, &b.ses.dataset.images, own_ctx.as_ref(), b.tau, &mut Mode::Inference)?;
        let d = match fau::multi_scale_divergence(global_capture, &own_capture) {
            Ok(r) => r.mean,
            Err(Error::Degenerate(_)) => client.d_cka,
            Err(e) => return Err(e),
        };
        (fau::fau_update(&client.params, b.global, d, b.schedule.eps_minus)?, Some(d))
    } else {
        (adopt_global(b.global, &client.params), None)
    };

    record(audit, me, Access::ClientTrain { owner: client.client_id });
    let train = &client.data.train;
    if train.is_empty() {
        return Err(Error::Data(format!("client {} has no training samples", client.client_id)));
    }
    let rectification = if cfg.toggles.cro { b.cr_tilde.to_vec() } else { vec![0.0; model_cfg.num_classes] };
    let mut rng = rng::stream(client.seed, &[b.round as u64]);
    let mut opt = Adam::new(&params);
    let mut epoch_losses = Vec::with_capacity(cfg.local_epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train.subset(chunk);
            let mut g = Graph::new();
            let bound = params.bind(&mut g, true);
            let x = g.constant(batch.images);
            let out = model::forward_graph(
                &mut g,
                model_cfg,
                &bound,
                x,
                own_ctx.as_ref(),
                b.tau,
                &mut Mode::Training(&mut rng),
            )?;
            let probs = g.softmax(out.logits)?;
            let loss =
                cro::cr_weighted_loss(&mut g, probs, &batch.labels, &rectification, cfg.cro.beta, b.schedule.eps_plus)?;
            total += g.value(loss).item() * chunk.len() as f64;
            let grads = g.backward(loss)?;
            let gs: Vec<&Tensor> =
                bound.entries().iter().map(|(_, v)| grads.get(**v).expect("every parameter is tracked")).collect();
            opt.step(&mut params, &gs, b.learning_rate)?;
        }
        epoch_losses.push(total / train.len() as f64);
    }
    Ok(Upload { client_id: client.client_id, params, samples: train.len(), d_cka, epoch_losses })
}

fn predictions(
    model_cfg: &ModelConfig,
    params: &ModelParams,
    ds: &Dataset,
    context: Option<&AceContextMatrix>,
    tau: f64,
) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(ds.len());
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (logits, _) = model::forward(model_cfg, params, &ds.batch(chunk), context, tau, &mut Mode::Inference)?;
        preds.extend(model::predict(&logits));
    }
    Ok(preds)
}

fn fresh_embedding(dim: usize, rng: &mut StreamRng) -> Tensor {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Tensor::new([dim], (0..dim).map(|_| normal.sample(rng)).collect()).expect("shape")
}

/// A running federation: server, clients and the evaluation harness.
pub struct Federation {
    cfg: RunConfig,
    model_cfg: ModelConfig,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    cloud_test: Dataset,
    dis_g: Vec<usize>,
    audit: Option<Arc<dyn AuditSink>>,
    pool: Option<rayon::ThreadPool>,
    snapshots: Vec<Vec<f64>>,
}

impl Federation {
    pub fn new(cfg: &RunConfig, data: FederatedData) -> Result<Self> {
        cfg.validate()?;
        let model_cfg = cfg.model_config();
        if data.clients.len() != cfg.clients {
            return Err(Error::config("clients", format!("data prepared for {} clients", data.clients.len())));
        }
        let mut global = ModelParams::init(&model_cfg, &mut rng::stream(cfg.seed, &[purpose::INIT]))?;
        for a in &mut global.ace {
            a.context_embedding.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let cloud_test = data.cloud_test()?;
        let mut clients = Vec::with_capacity(cfg.clients);
        for cd in data.clients {
            let id = cd.client_id;
            let mut params = global.clone();
            let mut erng = rng::stream(cfg.seed, &[purpose::INIT, 1 + id as u64]);
            for a in &mut params.ace {
                a.context_embedding = fresh_embedding(cfg.ace.dim, &mut erng);
            }
            clients.push(ClientState {
                client_id: id,
                data: cd,
                params,
                seed: rng::derive_seed(cfg.seed, &[purpose::CLIENT, id as u64]),
                d_cka: 1.0,
            });
        }
        let context = model_cfg.ace_enabled.then(|| {
            let stages = (0..model_cfg.stage_channels.len())
                .map(|s| {
                    let mut rows = Vec::with_capacity(cfg.clients * cfg.ace.dim);
                    for c in &clients {
                        rows.extend_from_slice(c.params.ace[s].context_embedding.data());
                    }
                    Tensor::new([cfg.clients, cfg.ace.dim], rows).expect("shape")
                })
                .collect();
            AceContextMatrix { stages, owner: None }
        });
        let pool = if cfg.workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(cfg.workers)
                    .build()
                    .map_err(|e| Error::config("workers", e.to_string()))?,
            )
        } else {
            None
        };
        Ok(Federation {
            cfg: cfg.clone(),
            model_cfg,
            server: ServerState {
                global,
                ses: data.ses,
                cr_tilde: vec![0.0; cfg.data.classes],
                d_cka: vec![1.0; cfg.clients],
                context,
                round: 0,
            },
            clients,
            cloud_test,
            dis_g: data.dis_g,
            audit: None,
            pool,
            snapshots: Vec::new(),
        })
    }

    /// Builds the data for `cfg` and the federation on top of it.
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        Self::new(cfg, data::prepare(&cfg.data, cfg.clients, cfg.seed)?)
    }

    pub fn with_audit(mut self, audit: Arc<dyn AuditSink>) -> Self {
        self.audit = Some(audit);
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.model_cfg
    }

    pub fn dis_g(&self) -> &[usize] {
        &self.dis_g
    }

    /// Schedule values of training round `l`.
    pub fn schedule(&self, l: usize) -> Result<Schedule> {
        let total = self.cfg.rounds;
        if !self.cfg.toggles.dmr {
            Ok(Schedule::disabled(l, total))
        } else if total == 0 {
            Ok(Schedule { round: 0, total: 0, eps_plus: 0.0, eps_minus: 1.0 })
        } else {
            Schedule::at(l, total)
        }
    }

    pub fn tau(&self, l: usize) -> f64 {
        ace::anneal_tau(l, self.cfg.rounds, &self.cfg.ace.gumbel())
    }

    fn audit(&self) -> Option<&Arc<dyn AuditSink>> {
        self.audit.as_ref()
    }

    /// Evaluation record labelled `round`, using the schedule of training
    /// round `l`.
    pub fn evaluate(&self, round: usize, l: usize) -> Result<RoundRecord> {
        let schedule = self.schedule(l)?;
        let tau = self.tau(l);
        let ctx = self.server.context.as_ref();
        record(self.audit(), Party::Evaluator, Access::CloudTest);
        let preds = predictions(&self.model_cfg, &self.server.global, &self.cloud_test, ctx, tau)?;
        let j = self.model_cfg.num_classes;
        let cloud_c_acc = metrics::class_accuracy(&preds, &self.cloud_test.labels, j)?;
        let cloud_s_acc = metrics::sample_accuracy(&preds, &self.cloud_test.labels)?;
        let mut client_c_acc = Vec::with_capacity(self.clients.len());
        let mut client_s_acc = Vec::with_capacity(self.clients.len());
        for c in &self.clients {
            let test = &c.data.test;
            if test.is_empty() {
                client_c_acc.push(None);
                client_s_acc.push(None);
                continue;
            }
            record(self.audit(), Party::Client(c.client_id), Access::ClientTest { owner: c.client_id });
            let own = ctx.map(|m| m.with_owner(Some(c.client_id)));
            let p = predictions(&self.model_cfg, &c.params, test, own.as_ref(), tau)?;
            client_c_acc.push(Some(metrics::class_accuracy(&p, &test.labels, j)?));
            client_s_acc.push(Some(metrics::sample_accuracy(&p, &test.labels)?));
        }
        Ok(RoundRecord {
            round,
            eps_plus: schedule.eps_plus,
            eps_minus: schedule.eps_minus,
            tau,
            cloud_c_acc,
            cloud_s_acc,
            client_c_acc,
            client_s_acc,
            d_cka: self.server.d_cka.clone(),
            cr_tilde: self.server.cr_tilde.clone(),
            ratio_cosine: metrics::ratio_similarity(&self.server.cr_tilde, &self.dis_g),
            trajectory: None,
        })
    }

    /// Re-measures class rectification on the current global model. A
    /// degenerate measurement keeps the previous estimate.
    pub fn refresh_cr(&mut self, tau: f64) -> Result<()> {
        record(self.audit(), Party::Server, Access::Ses);
        let g = cro::measure_class_gradients(
            &self.model_cfg,
            &self.server.global,
            &self.server.ses,
            self.server.context.as_ref(),
            tau,
        )?;
        match cro::compute_cr(&g) {
            Ok(cr) => self.server.cr_tilde = cro::normalize_cr(&cr),
            Err(Error::Degenerate(_)) => {}
            Err(e) => return Err(e),
        }
        Ok(())
    }

    /// Runs training round `server.round` and returns its evaluation.
    pub fn step(&mut self) -> Result<RoundRecord> {
        let l = self.server.round;
        self.step_inner(l).map_err(|e| e.in_round(l))
    }

    fn step_inner(&mut self, l: usize) -> Result<RoundRecord> {
        if l >= self.cfg.rounds {
            return Err(Error::invalid("step", format!("all {} rounds already ran", self.cfg.rounds)));
        }
        let schedule = self.schedule(l)?;
        let tau = self.tau(l);
        let selected = select_clients(
            self.cfg.clients,
            self.cfg.selected_per_round(),
            &mut rng::stream(self.cfg.seed, &[purpose::SELECT, l as u64]),
        )?;
        let global_capture = if self.cfg.toggles.fau && l.is_multiple_of(self.cfg.fau_period) {
            record(self.audit(), Party::Server, Access::Ses);
            let (_, cap) = model::forward(
                &self.model_cfg,
                &self.server.global,
                &self.server.ses.dataset.images,
                self.server.context.as_ref(),
                tau,
                &mut Mode::Inference,
            )?;
            Some(cap)
        } else {
            None
        };
        let broadcast = Broadcast {
            round: l,
            global: &self.server.global,
            cr_tilde: &self.server.cr_tilde,
            ses: &self.server.ses,
            global_capture: global_capture.as_ref(),
            context: self.server.context.as_ref(),
            schedule,
            tau,
            learning_rate: self.cfg.learning_rate_at(l),
        };
        let work = |id: &usize| {
            client_update(&self.clients[*id], &broadcast, &self.cfg, &self.model_cfg, self.audit.as_ref())
        };
        let uploads: Vec<Upload> = match &self.pool {
            Some(pool) => pool.install(|| selected.par_iter().map(work).collect::<Result<Vec<_>>>())?,
            None => selected.iter().map(work).collect::<Result<Vec<_>>>()?,
        };

        let global = aggregate(&uploads)?;
        for u in &uploads {
            record(self.audit(), Party::Server, Access::Upload { client: u.client_id });
            if let Some(ctx) = self.server.context.as_mut() {
                ctx.set_row(u.client_id, &u.params.embeddings())?;
            }
            if let Some(d) = u.d_cka {
                self.server.d_cka[u.client_id] = d;
            }
        }
        for u in uploads {
            let c = &mut self.clients[u.client_id];
            if let Some(d) = u.d_cka {
                c.d_cka = d;
            }
            c.params = u.params;
        }
        self.server.global = global;
        self.refresh_cr(tau)?;
        self.server.round += 1;
        if self.cfg.trajectory {
            self.snapshots.push(self.server.global.flatten().into_data());
        }
        self.evaluate(l + 1, l)
    }

    /// Initial evaluation, all rounds, and final confusion matrices.
    pub fn run(mut self) -> Result<RunReport> {
        let start = Instant::now();
        let mut records = vec![self.evaluate(0, 0)?];
        if self.cfg.trajectory {
            self.snapshots.push(self.server.global.flatten().into_data());
        }
        while self.server.round < self.cfg.rounds {
            records.push(self.step()?);
        }
        if self.cfg.trajectory && self.snapshots.len() >= 3 {
            for (r, p) in records.iter_mut().zip(metrics::pca_trajectory(&self.snapshots)?) {
                r.trajectory = Some(p);
            }
        }
        let tau = self.tau(self.cfg.rounds);
        let j = self.model_cfg.num_classes;
        let ctx = self.server.context.as_ref();
        let preds = predictions(&self.model_cfg, &self.server.global, &self.cloud_test, ctx, tau)?;
        let cloud_confusion = metrics::confusion(&preds, &self.cloud_test.labels, j)?;
        let mut client_confusion = Vec::with_capacity(self.clients.len());
        for c in &self.clients {
            if c.data.test.is_empty() {
                client_confusion.push(None);
                continue;
            }
            let own = ctx.map(|m| m.with_owner(Some(c.client_id)));
            let p = predictions(&self.model_cfg, &c.params, &c.data.test, own.as_ref(), tau)?;
            client_confusion.push(Some(metrics::confusion(&p, &c.data.test.labels, j)?));
        }
        Ok(RunReport {
            config: self.cfg,
            records,
            cloud_confusion,
            client_confusion,
            duration_secs: start.elapsed().as_secs_f64(),
        })
    }
}

/// Prepares data, trains for `cfg.rounds` rounds and evaluates every round.
pub fn run_training(cfg: &RunConfig) -> Result<RunReport> {
    Federation::from_config(cfg)?.run()
}
