//! Command-line pipeline driver.
//!
//! Subcommands cover the whole workflow: `synthgen` builds the object
//! library and synthetic dataset, `train` fits one stage (prior, contact
//! net, or evaluation classifier), `sample` draws coarse poses, `refine`
//! runs the full three-stage guided pipeline, `evaluate` scores a
//! generated dataset against a reference, and `fdcheck` re-runs every
//! finite-difference gradient oracle.
//!
//! Exit codes: 0 success, 1 verification failure, 2 I/O error, 3 input
//! parse error, 4 configuration error.  All randomness is derived from the
//! run seed through tagged streams, so identical invocations produce
//! byte-identical artifacts.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::ad::nn;
use crate::ad::optim::AdamW;
use crate::ad::tape::{Tape, Var};
use crate::ad::tensor::Tensor;
use crate::adapt::{self, AugmentSample, SynonymLexicon};
use crate::body::{self, BodyTemplate, HumanPose};
use crate::config::RunConfig;
use crate::contact::{self, ContactExample, ContactModel, ContactVector, CONTACT_DIM};
use crate::dataio::{self, HOIRecord, LibraryEntry, ObjectLibrary};
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, RigidPose6};
use crate::metrics::{self, LabeledPose, MetricReport};
use crate::prior::{PoseState, PriorModel, TrainExample, Vocabulary};
use crate::refiner::{self, AssignEntry, Assignment};
use crate::rng::{derive_seed, rng_for};

// ---- argument surface ----

#[derive(Debug, Parser)]
#[command(
    name = "hoi-forge",
    version,
    about = "Text-driven 3D human-object interaction pose pipeline"
)]
pub struct Cli {
    /// JSON run-configuration file; built-in defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Worker-thread cap.  The pipeline computes on one thread regardless,
    /// so results are identical for every value; the flag fixes the
    /// interface for future parallel paths.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum StageArg {
    Prior,
    Contact,
    Classifier,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the procedural object library and synthetic HOI dataset.
    Synthgen {
        /// Overrides the configured run seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the configured record count.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train one pipeline stage on the synthetic dataset.
    Train {
        /// Which stage to fit.
        #[arg(long, value_enum)]
        stage: StageArg,
        #[arg(long)]
        seed: Option<u64>,
        /// Prior conditioning variant: single | dual | rm_enc | rm.
        #[arg(long)]
        variant: Option<String>,
        /// Disable a mechanism: fcon | fnorm | gd | sa.  Repeatable.
        #[arg(long)]
        ablate: Vec<String>,
    },
    /// Draw coarse poses from the trained prior.
    Sample {
        /// Interaction prompt, e.g. "lift mug with right hand".
        #[arg(long)]
        prompt: String,
        /// Library object to condition on; defaults to the prompt's object.
        #[arg(long)]
        object: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Output dataset path; defaults to `<reports>/samples.hoid`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also export the first result as a Wavefront OBJ scene.
        #[arg(long)]
        obj_export: Option<PathBuf>,
    },
    /// Run the full three-stage pipeline: prior, contact net, guided prior.
    Refine {
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        object: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        /// A/B switch: `off` skips stages two and three and reproduces
        /// `sample` byte for byte.
        #[arg(long, default_value = "on", value_parser = ["on", "off"])]
        guidance: String,
        /// Write the per-step guidance-objective trace as CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        obj_export: Option<PathBuf>,
        /// Disable a mechanism: fcon | fnorm | gd | sa.  Repeatable.
        #[arg(long)]
        ablate: Vec<String>,
    },
    /// Score a generated dataset against a reference dataset.
    Evaluate {
        /// Generated dataset (`.hoid`).
        #[arg(long)]
        generated: PathBuf,
        /// Held-out reference dataset (`.hoid`).
        #[arg(long)]
        reference: PathBuf,
        /// Report path; defaults to `<reports>/report.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run every finite-difference gradient oracle.
    Fdcheck {
        /// Mixed absolute/relative error tolerance.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

/// Parses `args` and runs the selected command.  The first element is the
/// program name, as with `std::env::args`.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(());
            }
            return Err(Error::config(e.to_string()));
        }
    };

    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(t) = cli.threads {
        config.threads = t;
    }
    config.validate()?;

    match cli.command {
        Command::Synthgen { seed, count } => cmd_synthgen(config, seed, count),
        Command::Train {
            stage,
            seed,
            variant,
            ablate,
        } => cmd_train(config, stage, seed, variant, &ablate),
        Command::Sample {
            prompt,
            object,
            seed,
            count,
            out,
            obj_export,
        } => cmd_sample(config, &prompt, object, seed, count, out, obj_export),
        Command::Refine {
            prompt,
            object,
            seed,
            count,
            out,
            guidance,
            trace,
            obj_export,
            ablate,
        } => cmd_refine(
            config,
            &prompt,
            object,
            seed,
            count,
            out,
            guidance == "on",
            trace,
            obj_export,
            &ablate,
        ),
        Command::Evaluate {
            generated,
            reference,
            out,
        } => cmd_evaluate(config, &generated, &reference, out),
        Command::Fdcheck { tolerance } => cmd_fdcheck(tolerance),
    }
}

// ---- shared helpers ----

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

/// Vocabulary over every dataset prompt plus every lexicon term, so
/// synonym-adjusted prompts still tokenize without unknowns.
fn build_vocab<'a>(
    prompts: impl Iterator<Item = &'a str >,
    lexicon: &SynonymLexicon,
) -> Result<Vocabulary> {
    let mut words: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
    for prompt in prompts {
        for w in prompt.split_whitespace() {
            words.insert(w.to_lowercase());
        }
    }
    for action in lexicon.actions() {
        words.insert(action.to_lowercase());
        if let Some(syns) = lexicon.synonyms(action) {
            for s in syns {
                words.insert(s.to_lowercase());
            }
        }
    }
    Vocabulary::from_tokens(words)
}

/// Maps an action word (canonical or lexicon synonym) to its class id;
/// unknown words get the sentinel `u32::MAX`.
fn resolve_action(word: &str) -> u32 {
    if let Some(id) = dataio::action_id(word) {
        return id;
    }
    let lexicon = SynonymLexicon::shipped();
    for (i, action) in dataio::ACTIONS.iter().enumerate() {
        if let Some(syns) = lexicon.synonyms(action) {
            if syns.iter().any(|s| s == word) {
                return i as u32;
            }
        }
    }
    u32::MAX
}

fn lookup_entry<'a>(library: &'a ObjectLibrary, name: &str) -> Result<&'a LibraryEntry> {
    library.get(name).ok_or_else(|| {
        Error::config(format!(
            "object '{name}' is not in the library (have: {})",
            library.names().collect::<Vec<_>>().join(", ")
        ))
    })
}

fn write_loss_csv(path: &Path, fingerprint: &str, rows: &[(usize, f64)]) -> Result<()> {
    ensure_parent(path)?;
    let mut text = format!("# config {fingerprint}\nstep,loss\n");
    for (step, loss) in rows {
        text.push_str(&format!("{step},{loss}\n"));
    }
    fs::write(path, text)?;
    Ok(())
}

/// Exports one record as a Wavefront OBJ: the posed object mesh plus the
/// body's 52 skeleton joints as a marker point cloud (vertices without
/// faces).
fn export_obj(
    path: &Path,
    template: &BodyTemplate,
    record: &HOIRecord,
    entry: &LibraryEntry,
) -> Result<()> {
    ensure_parent(path)?;
    let mesh = entry.object.mesh.transformed(&record.object_pose);
    let mut text = String::from("# hoi-forge scene export\n");
    text.push_str(&format!("o {}\n", record.object_name));
    for v in &mesh.vertices {
        text.push_str(&format!("v {} {} {}\n", v[0], v[1], v[2]));
    }
    for f in &mesh.faces {
        text.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
    }
    let skel = body::forward_kinematics(template, &record.human);
    text.push_str("o body_joint_markers\n");
    for p in &skel.positions {
        text.push_str(&format!("v {} {} {}\n", p[0], p[1], p[2]));
    }
    fs::write(path, text)?;
    Ok(())
}

fn sampled_record(
    prompt: &str,
    object_name: &str,
    entry: &LibraryEntry,
    state: PoseState,
    contacts: Option<ContactVector>,
) -> Result<HOIRecord> {
    let parsed = dataio::parse_prompt(prompt)?;
    let contact = match contacts {
        Some(c) => c,
        None => ContactVector::from_flat(&[0.0; CONTACT_DIM])?,
    };
    Ok(HOIRecord {
        prompt: prompt.to_string(),
        action_id: resolve_action(&parsed.action),
        human: state.human,
        object_name: object_name.to_string(),
        object_pose: state.object,
        contact,
        rest_height: entry.rest_height,
    })
}

// ---- synthgen ----

fn cmd_synthgen(mut config: RunConfig, seed: Option<u64>, count: Option<usize>) -> Result<()> {
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(c) = count {
        config.dataset_count = c;
    }
    config.validate()?;

    let template = BodyTemplate::load_default()?;
    let library = ObjectLibrary::standard()?;
    let records = dataio::generate_dataset(&template, &library, config.dataset_count, config.seed)?;

    let mut kept = Vec::with_capacity(records.len());
    for r in &records {
        if dataio::filter_stable(r, &library)? {
            kept.push(r.clone());
        }
    }
    let rate = if records.is_empty() {
        1.0
    } else {
        kept.len() as f64 / records.len() as f64
    };

    library.save(&config.paths.objects_dir)?;
    ensure_parent(&config.paths.dataset)?;
    dataio::write_dataset(&kept, &config.paths.dataset)?;

    println!("config fingerprint: {}", config.fingerprint());
    println!(
        "objects: {} -> {}",
        library.len(),
        config.paths.objects_dir.display()
    );
    println!(
        "records: {} kept of {} generated -> {}",
        kept.len(),
        records.len(),
        config.paths.dataset.display()
    );
    println!("stable-filter pass rate: {rate:.3}");
    Ok(())
}

// ---- train ----

/// One conditioning sample: prompt, object geometry, and ground truth.
struct TrainSample {
    prompt: String,
    cloud: PointCloud,
    human: HumanPose,
    object_pose: RigidPose6,
    contact: ContactVector,
}

fn cmd_train(
    mut config: RunConfig,
    stage: StageArg,
    seed: Option<u64>,
    variant: Option<String>,
    ablate: &[String],
) -> Result<()> {
    if let Some(s) = seed {
        config.seed = s;
    }
    for a in ablate {
        config.ablation.set(a)?;
    }
    if let Some(v) = &variant {
        config.prior.variant = v.parse()?;
    }
    config.validate()?;

    let records = dataio::read_dataset(&config.paths.dataset)?;
    if records.is_empty() {
        return Err(Error::contract(
            "dataset is empty; run `hoi-forge synthgen` first",
        ));
    }

    match stage {
        StageArg::Classifier => train_classifier_stage(&config, &records),
        StageArg::Prior | StageArg::Contact => {
            let template = BodyTemplate::load_default()?;
            train_diffusion_stage(&config, stage, &template, &records)
        }
    }
}

/// Original records plus (when enabled) one augmented copy each, as
/// conditioning samples.  Augmented copies carry their deformed clouds.
fn assemble_samples(
    config: &RunConfig,
    template: &BodyTemplate,
    library: &ObjectLibrary,
    records: &[HOIRecord],
) -> Result<(Vec<TrainSample>, SynonymLexicon)> {
    let lexicon = SynonymLexicon::shipped();
    let mut samples = Vec::with_capacity(records.len() * 2);
    for r in records {
        let entry = lookup_entry(library, &r.object_name)?;
        samples.push(TrainSample {
            prompt: r.prompt.clone(),
            cloud: entry.object.cloud.clone(),
            human: r.human.clone(),
            object_pose: r.object_pose.clone(),
            contact: r.contact.clone(),
        });
    }

    let aug = config.effective_augment();
    if config.train.augment && (aug.geometry || aug.semantics) {
        let originals: Vec<AugmentSample> = records
            .iter()
            .map(|r| {
                let entry = lookup_entry(library, &r.object_name)?;
                Ok(AugmentSample {
                    object: entry.object.clone(),
                    prompt: r.prompt.clone(),
                    human: r.human.clone(),
                    object_pose: r.object_pose.clone(),
                    contact: r.contact.clone(),
                })
            })
            .collect::<Result<_>>()?;
        let mut rng = rng_for(config.seed, "augment", 0);
        let augmented = adapt::augment_batch(template, &originals, &aug, &lexicon, &mut rng)?;
        for a in augmented {
            samples.push(TrainSample {
                prompt: a.prompt,
                cloud: a.object.cloud,
                human: a.human,
                object_pose: a.object_pose,
                contact: a.contact,
            });
        }
    }
    Ok((samples, lexicon))
}

fn train_diffusion_stage(
    config: &RunConfig,
    stage: StageArg,
    template: &BodyTemplate,
    records: &[HOIRecord],
) -> Result<()> {
    let library = ObjectLibrary::load(&config.paths.objects_dir)?;
    let (samples, lexicon) = assemble_samples(config, template, &library, records)?;
    let vocab = build_vocab(samples.iter().map(|s| s.prompt.as_str()), &lexicon)?;
    let fingerprint = config.fingerprint();

    let (stage_name, losses, final_loss) = match stage {
        StageArg::Prior => {
            let settings = &config.train.prior;
            let mut model = PriorModel::new(
                config.prior.clone(),
                vocab,
                derive_seed(config.seed, "prior-init", 0),
            )?;
            let examples: Vec<TrainExample> = samples
                .iter()
                .map(|s| {
                    let state = PoseState {
                        human: s.human.clone(),
                        object: s.object_pose.clone(),
                    };
                    Ok(TrainExample {
                        x0: state.flatten(),
                        raw: model.raw_condition(&s.prompt, &s.cloud)?,
                    })
                })
                .collect::<Result<_>>()?;
            let sched = model.schedule()?;
            let mut opt = AdamW::new(&model.store, settings.lr, settings.weight_decay);
            let mut rng = rng_for(config.seed, "train-prior", 0);
            let mut losses = Vec::new();
            let mut last = f64::NAN;
            for step in 0..settings.steps {
                let batch: Vec<TrainExample> = (0..settings.batch_size)
                    .map(|k| examples[(step * settings.batch_size + k) % examples.len()].clone())
                    .collect();
                last = model.training_step(&mut opt, &batch, &sched, &mut rng)?;
                if step % settings.log_every == 0 || step + 1 == settings.steps {
                    losses.push((step, last));
                }
            }
            model.save(&config.paths.prior_dir)?;
            ("prior", losses, last)
        }
        StageArg::Contact => {
            let settings = &config.train.contact;
            let mut model = ContactModel::new(
                config.contact.clone(),
                vocab,
                derive_seed(config.seed, "contact-init", 0),
            )?;
            let examples: Vec<ContactExample> = samples
                .iter()
                .map(|s| {
                    Ok(ContactExample {
                        y0: s.contact.flatten(),
                        raw: model.raw_condition(&s.prompt, &s.cloud, &s.human)?,
                    })
                })
                .collect::<Result<_>>()?;
            let sched = model.schedule()?;
            let mut opt = AdamW::new(&model.store, settings.lr, settings.weight_decay);
            let mut rng = rng_for(config.seed, "train-contact", 0);
            let mut losses = Vec::new();
            let mut last = f64::NAN;
            for step in 0..settings.steps {
                let batch: Vec<ContactExample> = (0..settings.batch_size)
                    .map(|k| examples[(step * settings.batch_size + k) % examples.len()].clone())
                    .collect();
                last = model.training_step(&mut opt, &batch, &sched, &mut rng)?;
                if step % settings.log_every == 0 || step + 1 == settings.steps {
                    losses.push((step, last));
                }
            }
            model.save(&config.paths.contact_dir)?;
            ("contact", losses, last)
        }
        StageArg::Classifier => unreachable!("classifier handled separately"),
    };

    let csv = config.paths.reports_dir.join(format!("loss_{stage_name}.csv"));
    write_loss_csv(&csv, &fingerprint, &losses)?;
    println!("config fingerprint: {fingerprint}");
    println!(
        "{} trained on {} examples ({} augmented) for {} steps; final loss {:.6}",
        stage_name,
        samples.len(),
        samples.len() - records.len(),
        losses.last().map(|(s, _)| s + 1).unwrap_or(0).max(
            match stage {
                StageArg::Prior => config.train.prior.steps,
                _ => config.train.contact.steps,
            }
        ),
        final_loss
    );
    println!("loss curve -> {}", csv.display());
    Ok(())
}

fn train_classifier_stage(config: &RunConfig, records: &[HOIRecord]) -> Result<()> {
    let samples: Vec<LabeledPose> = records
        .iter()
        .filter(|r| r.action_id != u32::MAX)
        .map(|r| LabeledPose {
            pose: r.human.clone(),
            label: r.action_id as usize,
        })
        .collect();
    if samples.is_empty() {
        return Err(Error::contract("no records carry a known action label"));
    }
    let mut rng = rng_for(config.seed, "train-classifier", 0);
    let (model, stats) = metrics::train_classifier(&samples, &config.classifier, &mut rng)?;
    model.save(&config.paths.classifier_dir)?;
    let csv = config.paths.reports_dir.join("loss_classifier.csv");
    write_loss_csv(&csv, &config.fingerprint(), &stats.losses)?;
    println!("config fingerprint: {}", config.fingerprint());
    println!(
        "classifier trained on {} poses ({} classes); holdout top-1 {:.3} over {} held out",
        stats.train_size,
        model.num_classes,
        stats.holdout_top1,
        stats.holdout_size
    );
    println!("loss curve -> {}", csv.display());
    Ok(())
}

// ---- sample ----

#[allow(clippy::too_many_arguments)]
fn cmd_sample(
    mut config: RunConfig,
    prompt: &str,
    object: Option<String>,
    seed: Option<u64>,
    count: usize,
    out: Option<PathBuf>,
    obj_export: Option<PathBuf>,
) -> Result<()> {
    if let Some(s) = seed {
        config.seed = s;
    }
    if count == 0 {
        return Err(Error::config("--count must be at least 1"));
    }
    let parsed = dataio::parse_prompt(prompt)?;
    let object_name = object.unwrap_or_else(|| parsed.object.clone());

    let template = BodyTemplate::load_default()?;
    let library = ObjectLibrary::load(&config.paths.objects_dir)?;
    let entry = lookup_entry(&library, &object_name)?;
    let prior = PriorModel::load(&config.paths.prior_dir)?;
    let bundle = prior.prepare_condition(prompt, &entry.object.cloud)?;

    let mut out_records = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = rng_for(config.seed, "generate", i as u64);
        let state = prior.sample_pose(&bundle, None, &mut rng, None)?;
        out_records.push(sampled_record(prompt, &object_name, entry, state, None)?);
    }

    let out_path = out.unwrap_or_else(|| config.paths.reports_dir.join("samples.hoid"));
    ensure_parent(&out_path)?;
    dataio::write_dataset(&out_records, &out_path)?;
    println!("config fingerprint: {}", config.fingerprint());
    println!(
        "sampled {count} pose(s) for \"{prompt}\" -> {}",
        out_path.display()
    );
    if let Some(p) = obj_export {
        export_obj(&p, &template, &out_records[0], entry)?;
        println!("scene export -> {}", p.display());
    }
    Ok(())
}

// ---- refine ----

#[allow(clippy::too_many_arguments)]
fn cmd_refine(
    mut config: RunConfig,
    prompt: &str,
    object: Option<String>,
    seed: Option<u64>,
    count: usize,
    out: Option<PathBuf>,
    guidance_on: bool,
    trace: Option<PathBuf>,
    obj_export: Option<PathBuf>,
    ablate: &[String],
) -> Result<()> {
    if let Some(s) = seed {
        config.seed = s;
    }
    for a in ablate {
        config.ablation.set(a)?;
    }
    config.validate()?;
    if count == 0 {
        return Err(Error::config("--count must be at least 1"));
    }
    let parsed = dataio::parse_prompt(prompt)?;
    let object_name = object.unwrap_or_else(|| parsed.object.clone());

    let template = BodyTemplate::load_default()?;
    let library = ObjectLibrary::load(&config.paths.objects_dir)?;
    let entry = lookup_entry(&library, &object_name)?;
    let prior = PriorModel::load(&config.paths.prior_dir)?;
    let bundle = prior.prepare_condition(prompt, &entry.object.cloud)?;

    let mut out_records = Vec::with_capacity(count);
    let mut traces: Vec<Vec<(usize, f64)>> = Vec::with_capacity(count);

    if !guidance_on {
        // Pure A/B switch: same RNG stream as `sample`, so the output file
        // is byte-identical to a `sample` run with the same arguments.
        for i in 0..count {
            let mut rng = rng_for(config.seed, "generate", i as u64);
            let state = prior.sample_pose(&bundle, None, &mut rng, None)?;
            out_records.push(sampled_record(prompt, &object_name, entry, state, None)?);
            traces.push(Vec::new());
        }
    } else {
        let contact_model = ContactModel::load(&config.paths.contact_dir)?;
        let gcfg = config.effective_guidance();
        for i in 0..count {
            let mut rng_coarse = rng_for(config.seed, "coarse", i as u64);
            let coarse = prior.sample_pose(&bundle, None, &mut rng_coarse, None)?;

            let ccond =
                contact_model.prepare_condition(prompt, &entry.object.cloud, &coarse.human)?;
            let mut rng_contact = rng_for(config.seed, "contact", i as u64);
            let contacts = contact_model.sample_contacts(&ccond, &mut rng_contact, None)?;
            let selection = contact::select_contacts(&contacts, contact_model.config.tau)?;
            let assignment = refiner::build_assignment(&selection, &entry.object.cloud);

            // Shares the `sample` noise stream so guided and unguided runs
            // form matched pairs.
            let mut rng_refine = rng_for(config.seed, "generate", i as u64);
            let (refined, step_trace) = refiner::refine_with_assignment(
                &prior,
                &bundle,
                &template,
                &assignment,
                &gcfg,
                &mut rng_refine,
            )?;
            out_records.push(sampled_record(
                prompt,
                &object_name,
                entry,
                refined,
                Some(contacts),
            )?);
            traces.push(step_trace);
        }
    }

    let out_path = out.unwrap_or_else(|| config.paths.reports_dir.join("refined.hoid"));
    ensure_parent(&out_path)?;
    dataio::write_dataset(&out_records, &out_path)?;
    println!("config fingerprint: {}", config.fingerprint());
    println!(
        "refined {count} pose(s) for \"{prompt}\" (guidance {}) -> {}",
        if guidance_on { "on" } else { "off" },
        out_path.display()
    );

    if let Some(tp) = trace {
        ensure_parent(&tp)?;
        let mut text = format!("# config {}\nrecord,step,g_total\n", config.fingerprint());
        for (i, tr) in traces.iter().enumerate() {
            for (step, g) in tr {
                text.push_str(&format!("{i},{step},{g}\n"));
            }
        }
        fs::write(&tp, text)?;
        println!("guidance trace -> {}", tp.display());
    }
    if let Some(p) = obj_export {
        export_obj(&p, &template, &out_records[0], entry)?;
        println!("scene export -> {}", p.display());
    }
    Ok(())
}

// ---- evaluate ----

fn cmd_evaluate(
    config: RunConfig,
    generated: &Path,
    reference: &Path,
    out: Option<PathBuf>,
) -> Result<()> {
    let template = BodyTemplate::load_default()?;
    let gen = dataio::read_dataset(generated)?;
    let reference_set = dataio::read_dataset(reference)?;
    if gen.is_empty() || reference_set.is_empty() {
        return Err(Error::contract("evaluation requires non-empty datasets"));
    }

    let extractor = metrics::FeatureExtractor::load(&config.paths.classifier_dir)?;
    if extractor.num_classes < 3 {
        return Err(Error::config(format!(
            "top-3 accuracy needs at least 3 action classes; classifier has {}",
            extractor.num_classes
        )));
    }

    let labeled: Vec<LabeledPose> = gen
        .iter()
        .filter(|r| (r.action_id as usize) < extractor.num_classes)
        .map(|r| LabeledPose {
            pose: r.human.clone(),
            label: r.action_id as usize,
        })
        .collect();
    if labeled.is_empty() {
        return Err(Error::contract(
            "no generated records carry a known action label",
        ));
    }
    let accuracy = metrics::accuracy_top3(&extractor, &labeled)?;

    let feats_gen: Vec<Vec<f64>> = gen.iter().map(|r| extractor.features(&r.human)).collect();
    let feats_ref: Vec<Vec<f64>> = reference_set
        .iter()
        .map(|r| extractor.features(&r.human))
        .collect();
    let fid = metrics::fid(&feats_gen, &feats_ref)?;

    let diversity_pairs = config
        .metrics
        .diversity_pairs
        .min(feats_gen.len() / 2)
        .max(1);
    let mut rng_div = rng_for(config.seed, "evaluate-diversity", 0);
    let diversity = metrics::diversity(&feats_gen, config.metrics.diversity_pairs, &mut rng_div)?;

    let mut groups: BTreeMap<&str, Vec<Vec<f64>>> = BTreeMap::new();
    for (r, f) in gen.iter().zip(&feats_gen) {
        groups.entry(r.prompt.as_str()).or_default().push(f.clone());
    }
    let group_list: Vec<Vec<Vec<f64>>> = groups.into_values().collect();
    let mut rng_mm = rng_for(config.seed, "evaluate-multimodality", 0);
    let mm = metrics::multimodality(&group_list, config.metrics.multimodality_pairs, &mut rng_mm)?;

    let library = ObjectLibrary::load(&config.paths.objects_dir)?;
    let iv_take = config.metrics.iv_samples.min(gen.len());
    let mut iv_sum = 0.0;
    for r in gen.iter().take(iv_take) {
        let entry = lookup_entry(&library, &r.object_name)?;
        iv_sum += metrics::intersect_volume(&template, &r.human, &entry.object, &r.object_pose)?;
    }
    let iv = if iv_take == 0 { 0.0 } else { iv_sum / iv_take as f64 };

    let report = MetricReport {
        accuracy_top3: accuracy,
        accuracy_samples: labeled.len(),
        fid,
        fid_samples_generated: feats_gen.len(),
        fid_samples_reference: feats_ref.len(),
        diversity,
        diversity_pairs,
        multimodality: mm.value,
        multimodality_groups: mm.groups_used,
        multimodality_skipped: mm.groups_skipped,
        iv_cm3: iv,
        iv_samples: iv_take,
        config_fingerprint: config.fingerprint(),
    };
    report.validate()?;
    let json = report.to_json()?;

    let out_path = out.unwrap_or_else(|| config.paths.reports_dir.join("report.json"));
    ensure_parent(&out_path)?;
    fs::write(&out_path, &json)?;
    println!("{json}");
    println!("report -> {}", out_path.display());
    Ok(())
}

// ---- fdcheck ----

/// One finite-difference oracle result.
pub struct FdReport {
    pub name: &'static str,
    pub max_err: f64,
}

struct TapeCase {
    name: &'static str,
    inputs: Vec<Tensor>,
    build: Box<dyn Fn(&mut Tape, &[Var]) -> Var>,
}

fn rand_tensor(shape: &[usize], rng: &mut rand_chacha::ChaCha8Rng) -> Tensor {
    use rand::Rng;
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-0.9..0.9)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data agree")
}

fn tape_cases() -> Vec<TapeCase> {
    let mut rng = rng_for(0xFD, "fdcheck", 0);
    let mut cases: Vec<TapeCase> = Vec::new();
    let mut push = |name: &'static str,
                    shapes: &[&[usize]],
                    rng: &mut rand_chacha::ChaCha8Rng,
                    build: Box<dyn Fn(&mut Tape, &[Var]) -> Var>| {
        let inputs = shapes.iter().map(|s| rand_tensor(s, rng)).collect();
        cases.push(TapeCase {
            name,
            inputs,
            build,
        });
    };

    push(
        "matmul",
        &[&[3, 4], &[4, 2]],
        &mut rng,
        Box::new(|t, v| t.matmul(v[0], v[1])),
    );
    push(
        "add",
        &[&[2, 3], &[2, 3]],
        &mut rng,
        Box::new(|t, v| t.add(v[0], v[1])),
    );
    push(
        "add_bias",
        &[&[3, 4], &[4]],
        &mut rng,
        Box::new(|t, v| t.add_bias(v[0], v[1])),
    );
    push(
        "sub",
        &[&[2, 3], &[2, 3]],
        &mut rng,
        Box::new(|t, v| t.sub(v[0], v[1])),
    );
    push(
        "mul",
        &[&[2, 3], &[2, 3]],
        &mut rng,
        Box::new(|t, v| t.mul(v[0], v[1])),
    );
    // Denominator kept away from zero through x^2 + 1/2.
    push(
        "div",
        &[&[2, 3], &[2, 3]],
        &mut rng,
        Box::new(|t, v| {
            let sq = t.mul(v[1], v[1]);
            let den = t.add_scalar(sq, 0.5);
            t.div(v[0], den)
        }),
    );
    push(
        "scale",
        &[&[2, 4]],
        &mut rng,
        Box::new(|t, v| t.scale(v[0], 1.7)),
    );
    push(
        "add_scalar",
        &[&[2, 4]],
        &mut rng,
        Box::new(|t, v| t.add_scalar(v[0], 0.3)),
    );
    push("neg", &[&[2, 4]], &mut rng, Box::new(|t, v| t.neg(v[0])));
    push("sum", &[&[2, 4]], &mut rng, Box::new(|t, v| t.sum(v[0])));
    push("mean", &[&[2, 4]], &mut rng, Box::new(|t, v| t.mean(v[0])));
    push(
        "softmax",
        &[&[3, 5]],
        &mut rng,
        Box::new(|t, v| t.softmax(v[0])),
    );
    push(
        "layer_norm",
        &[&[3, 6], &[6], &[6]],
        &mut rng,
        Box::new(|t, v| {
            let gain = t.add_scalar(v[1], 1.5);
            t.layer_norm(v[0], gain, v[2], 1e-5)
        }),
    );
    push("gelu", &[&[2, 5]], &mut rng, Box::new(|t, v| t.gelu(v[0])));
    push("tanh", &[&[2, 5]], &mut rng, Box::new(|t, v| t.tanh(v[0])));
    push(
        "sigmoid",
        &[&[2, 5]],
        &mut rng,
        Box::new(|t, v| t.sigmoid(v[0])),
    );
    // Argument kept strictly positive through x^2 + 1/2.
    push(
        "sqrt",
        &[&[2, 5]],
        &mut rng,
        Box::new(|t, v| {
            let sq = t.mul(v[0], v[0]);
            let pos = t.add_scalar(sq, 0.5);
            t.sqrt(pos)
        }),
    );
    // Rate zero keeps the mask deterministic (identity).
    push(
        "dropout",
        &[&[2, 5]],
        &mut rng,
        Box::new(|t, v| {
            let mut r = rng_for(0xFD, "dropout-mask", 0);
            t.dropout(v[0], 0.0, &mut r)
        }),
    );
    push(
        "transpose",
        &[&[2, 4]],
        &mut rng,
        Box::new(|t, v| t.transpose(v[0])),
    );
    push(
        "concat_rows",
        &[&[2, 3], &[1, 3]],
        &mut rng,
        Box::new(|t, v| t.concat_rows(&[v[0], v[1]])),
    );
    push(
        "concat_cols",
        &[&[2, 2], &[2, 3]],
        &mut rng,
        Box::new(|t, v| t.concat_cols(&[v[0], v[1]])),
    );
    push(
        "slice_rows",
        &[&[4, 3]],
        &mut rng,
        Box::new(|t, v| t.slice_rows(v[0], 1, 2)),
    );
    push(
        "slice_cols",
        &[&[2, 6]],
        &mut rng,
        Box::new(|t, v| t.slice_cols(v[0], 1, 3)),
    );
    // Repeated index exercises gradient accumulation into the table.
    push(
        "embed_rows",
        &[&[5, 4]],
        &mut rng,
        Box::new(|t, v| t.embed_rows(v[0], &[0, 2, 2, 4])),
    );
    push(
        "max_rows",
        &[&[3, 5]],
        &mut rng,
        Box::new(|t, v| t.max_rows(v[0])),
    );
    push(
        "mean_rows",
        &[&[3, 5]],
        &mut rng,
        Box::new(|t, v| t.mean_rows(v[0])),
    );
    push(
        "rodrigues",
        &[&[1, 3]],
        &mut rng,
        Box::new(|t, v| t.rodrigues(v[0])),
    );
    push(
        "cross_entropy",
        &[&[4, 5]],
        &mut rng,
        Box::new(|t, v| t.cross_entropy(v[0], &[0, 3, 2, 1])),
    );
    push(
        "sum_squares",
        &[&[2, 4]],
        &mut rng,
        Box::new(|t, v| t.sum_squares(v[0])),
    );
    push(
        "mse",
        &[&[2, 4], &[2, 4]],
        &mut rng,
        Box::new(|t, v| t.mse(v[0], v[1])),
    );
    push(
        "attention",
        &[&[4, 8], &[4, 8], &[4, 8]],
        &mut rng,
        Box::new(|t, v| nn::attention(t, v[0], v[1], v[2], 2)),
    );
    cases
}

/// Central-difference error for one tape case: non-scalar outputs are
/// reduced through `sum_squares`, every input entry is perturbed by ±1e-6,
/// and the mixed error `|g − fd| / max(1, |fd|)` is maximized.
fn fd_tape_error(case: &TapeCase) -> Result<f64> {
    let eval = |inputs: &[Tensor], want_grads: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = (case.build)(&mut tape, &leaves);
        let loss = if tape.value(out).numel() == 1 {
            out
        } else {
            tape.sum_squares(out)
        };
        let value = tape.value(loss).data[0];
        if !want_grads {
            return Ok((value, Vec::new()));
        }
        let grads = tape.backward(loss)?;
        let g = leaves
            .iter()
            .map(|&l| {
                grads
                    .wrt(l)
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![0.0; tape.value(l).numel()])
            })
            .collect();
        Ok((value, g))
    };

    let (_, analytic) = eval(&case.inputs, true)?;
    let h = 1e-6;
    let mut max_err: f64 = 0.0;
    for ti in 0..case.inputs.len() {
        for j in 0..case.inputs[ti].data.len() {
            let mut plus = case.inputs.clone();
            plus[ti].data[j] += h;
            let mut minus = case.inputs.clone();
            minus[ti].data[j] -= h;
            let fd = (eval(&plus, false)?.0 - eval(&minus, false)?.0) / (2.0 * h);
            let err = (analytic[ti][j] - fd).abs() / fd.abs().max(1.0);
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}

/// Central-difference error for a scalar objective with an analytic
/// gradient, evaluated at `x0`.
fn fd_scalar_error(
    x0: &[f64],
    f: &dyn Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
) -> Result<f64> {
    let (_, grad) = f(x0)?;
    let h = 1e-6;
    let mut max_err: f64 = 0.0;
    for j in 0..x0.len() {
        let mut plus = x0.to_vec();
        plus[j] += h;
        let mut minus = x0.to_vec();
        minus[j] -= h;
        let fd = (f(&plus)?.0 - f(&minus)?.0) / (2.0 * h);
        let err = (grad[j] - fd).abs() / fd.abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

fn unit3(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Guidance-term oracles at one fixed, generic configuration: tilted body
/// (so the balance term is active and away from its boundary), a small
/// contact assignment, and a generic object pose.
fn refiner_cases() -> Result<Vec<FdReport>> {
    use rand::Rng;
    let template = BodyTemplate::load_default()?;
    let assignment = Assignment {
        entries: vec![
            AssignEntry {
                joint: 0,
                point: [0.02, 0.01, 0.015],
                normal: Some(unit3([0.3, -0.8, 0.5])),
            },
            AssignEntry {
                joint: 7,
                point: [-0.015, 0.02, -0.01],
                normal: Some(unit3([-0.5, 0.2, 0.8])),
            },
            AssignEntry {
                joint: 19,
                point: [0.0, -0.02, 0.01],
                normal: None,
            },
        ],
    };

    let mut rng = rng_for(0xFD, "refiner-state", 0);
    let mut x0 = vec![0.0; crate::prior::STATE_DIM];
    x0[0] = 0.9; // forward tilt puts the hip outside the support polygon
    x0[1] = 0.1;
    x0[2] = -0.2;
    for v in x0.iter_mut().take(156).skip(3) {
        *v = rng.random_range(-0.2..0.2);
    }
    x0[156] = 0.05;
    x0[157] = -0.04;
    x0[158] = 0.92;
    x0[159] = 0.02;
    x0[160] = 0.01;
    x0[161] = 0.95;
    x0[162] = 0.3;
    x0[163] = -0.2;
    x0[164] = 0.1;

    let t = &template;
    let a = &assignment;
    let g_con = move |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        refiner::g_con(t, &PoseState::from_flat(x)?, a)
    };
    let g_norm = move |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        refiner::g_norm(t, &PoseState::from_flat(x)?, a, false)
    };
    let gcfg = crate::refiner::GuidanceConfig::default();
    let g_total = move |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        refiner::g_total(t, &PoseState::from_flat(x)?, a, &gcfg)
    };
    let g_balance = move |p: &[f64]| -> Result<(f64, Vec<f64>)> {
        refiner::g_balance(t, &HumanPose::from_vec(p.to_vec())?)
    };

    let pose0 = &x0[..crate::body::POSE_DIM];
    Ok(vec![
        FdReport {
            name: "g_con",
            max_err: fd_scalar_error(&x0, &g_con)?,
        },
        FdReport {
            name: "g_norm",
            max_err: fd_scalar_error(&x0, &g_norm)?,
        },
        FdReport {
            name: "g_balance",
            max_err: fd_scalar_error(pose0, &g_balance)?,
        },
        FdReport {
            name: "g_total",
            max_err: fd_scalar_error(&x0, &g_total)?,
        },
    ])
}

/// Every finite-difference oracle: one entry per differentiable tape op
/// plus the composed attention block and the four guidance terms.
pub fn fd_suite() -> Result<Vec<FdReport>> {
    let mut out = Vec::new();
    for case in tape_cases() {
        out.push(FdReport {
            name: case.name,
            max_err: fd_tape_error(&case)?,
        });
    }
    out.extend(refiner_cases()?);
    Ok(out)
}

fn cmd_fdcheck(tolerance: f64) -> Result<()> {
    if !(tolerance > 0.0) {
        return Err(Error::config("--tolerance must be positive"));
    }
    let reports = fd_suite()?;
    let mut failures = Vec::new();
    for r in &reports {
        let status = if r.max_err <= tolerance { "ok" } else { "FAIL" };
        println!("{:<14} max error {:.3e}  {status}", r.name, r.max_err);
        if r.max_err > tolerance {
            failures.push(format!("{} ({:.3e})", r.name, r.max_err));
        }
    }
    if !failures.is_empty() {
        return Err(Error::Verification(format!(
            "finite-difference check failed for {} of {} ops: {}",
            failures.len(),
            reports.len(),
            failures.join(", ")
        )));
    }
    println!(
        "fdcheck: all {} gradient oracles within {:.1e}",
        reports.len(),
        tolerance
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Paths;
    use std::path::Path;

    fn exit_code<T>(r: Result<T>) -> i32 {
        match r {
            Ok(_) => 0,
            Err(e) => e.exit_code(),
        }
    }

    /// A configuration small enough that every stage trains in seconds.
    fn tiny_config(dir: &Path) -> RunConfig {
        let mut c = RunConfig::default();
        c.seed = 11;
        c.dataset_count = 16;
        c.paths = Paths::under(dir);
        c.prior.width = 16;
        c.prior.heads = 2;
        c.prior.layers = 1;
        c.prior.ff_dim = 32;
        c.prior.n_points = 8;
        c.prior.t_count = 8;
        c.contact.width = 16;
        c.contact.heads = 2;
        c.contact.layers = 1;
        c.contact.ff_dim = 32;
        c.contact.n_points = 8;
        c.contact.t_count = 8;
        c.classifier.feature_dim = 16;
        c.classifier.steps = 150;
        c.classifier.batch_size = 8;
        c.train.prior.steps = 20;
        c.train.prior.batch_size = 2;
        c.train.prior.log_every = 5;
        c.train.contact.steps = 15;
        c.train.contact.batch_size = 2;
        c.train.contact.log_every = 5;
        c.metrics.diversity_pairs = 20;
        c.metrics.multimodality_pairs = 10;
        c.metrics.iv_samples = 3;
        c
    }

    fn write_config(dir: &Path) -> std::path::PathBuf {
        let c = tiny_config(dir);
        let path = dir.join("config.json");
        c.save(&path).unwrap();
        path
    }

    fn run_args(args: &[&str]) -> Result<()> {
        run(std::iter::once("hoi-forge").chain(args.iter().copied()))
    }

    /// [TRIVIAL] Help and version print and exit cleanly; unknown flags are
    /// configuration errors (exit 4).
    #[test]
    fn help_version_and_bad_flags() {
        assert!(run_args(&["--help"]).is_ok());
        assert!(run_args(&["--version"]).is_ok());
        assert!(run_args(&["synthgen", "--help"]).is_ok());
        assert_eq!(exit_code(run_args(&["--definitely-not-a-flag"])), 4);
        assert_eq!(exit_code(run_args(&["train", "--stage", "nonsense"])), 4);
        assert_eq!(exit_code(run_args(&["refine", "--prompt", "x", "--guidance", "sideways"])), 4);
    }

    /// [DERIVED] `synthgen` writes the library and dataset, reports a
    /// stable-filter pass rate of 1.000 by construction, and identical
    /// invocations produce byte-identical artifacts.
    #[test]
    fn synthgen_is_deterministic_and_complete() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path());
        let cfg_s = cfg.to_str().unwrap();

        run_args(&["synthgen", "--config", cfg_s, "--count", "12"]).unwrap();
        let c = tiny_config(dir.path());
        let records = dataio::read_dataset(&c.paths.dataset).unwrap();
        assert_eq!(records.len(), 12, "all generated records pass the filter");
        let library = ObjectLibrary::load(&c.paths.objects_dir).unwrap();
        assert_eq!(library.len(), 4);
        for r in &records {
            assert!(dataio::filter_stable(r, &library).unwrap());
        }

        let bytes1 = std::fs::read(&c.paths.dataset).unwrap();
        run_args(&["synthgen", "--config", cfg_s, "--count", "12"]).unwrap();
        let bytes2 = std::fs::read(&c.paths.dataset).unwrap();
        assert_eq!(bytes1, bytes2, "synthgen must be bitwise reproducible");

        // A different seed changes the data.
        run_args(&["synthgen", "--config", cfg_s, "--count", "12", "--seed", "99"]).unwrap();
        let bytes3 = std::fs::read(&c.paths.dataset).unwrap();
        assert_ne!(bytes1, bytes3);
    }

    /// [DERIVED] The full pipeline runs end to end on a tiny configuration:
    /// train prior and contact stages, sample, and refine.  Repeat
    /// invocations are bitwise identical, and `refine --guidance off`
    /// reproduces `sample` exactly.
    #[test]
    fn train_sample_refine_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path());
        let cfg_s = cfg.to_str().unwrap();
        let c = tiny_config(dir.path());

        run_args(&["synthgen", "--config", cfg_s]).unwrap();
        run_args(&["train", "--config", cfg_s, "--stage", "prior"]).unwrap();
        run_args(&["train", "--config", cfg_s, "--stage", "contact"]).unwrap();

        // Loss CSVs: fingerprint header plus one row per logging interval.
        let prior_csv =
            std::fs::read_to_string(c.paths.reports_dir.join("loss_prior.csv")).unwrap();
        let mut lines = prior_csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            format!("# config {}", c.fingerprint())
        );
        assert_eq!(lines.next().unwrap(), "step,loss");
        let rows: Vec<&str> = lines.collect();
        // Steps 0,5,10,15 from log_every=5 plus the final step 19.
        assert_eq!(rows.len(), 5);
        for row in &rows {
            let (step, loss) = row.split_once(',').unwrap();
            step.parse::<usize>().unwrap();
            assert!(loss.parse::<f64>().unwrap().is_finite());
        }

        let prompt = "lift mug with right hand";
        let a = dir.path().join("a.hoid");
        let b = dir.path().join("b.hoid");
        run_args(&[
            "sample", "--config", cfg_s, "--prompt", prompt, "--count", "2", "--out",
            a.to_str().unwrap(),
        ])
        .unwrap();
        run_args(&[
            "sample", "--config", cfg_s, "--prompt", prompt, "--count", "2", "--out",
            b.to_str().unwrap(),
        ])
        .unwrap();
        let bytes_a = std::fs::read(&a).unwrap();
        assert_eq!(bytes_a, std::fs::read(&b).unwrap(), "sampling is deterministic");
        let sampled = dataio::read_dataset(&a).unwrap();
        assert_eq!(sampled.len(), 2);
        assert_eq!(sampled[0].object_name, "mug");
        assert_eq!(sampled[0].action_id, 0);

        // Guidance off is a pure A/B switch: byte-identical to `sample`.
        let off = dir.path().join("off.hoid");
        run_args(&[
            "refine", "--config", cfg_s, "--prompt", prompt, "--count", "2", "--guidance",
            "off", "--out", off.to_str().unwrap(),
        ])
        .unwrap();
        assert_eq!(bytes_a, std::fs::read(&off).unwrap());

        // Guided refinement with trace and OBJ export.
        let on = dir.path().join("on.hoid");
        let trace = dir.path().join("trace.csv");
        let obj = dir.path().join("scene.obj");
        run_args(&[
            "refine", "--config", cfg_s, "--prompt", prompt, "--count", "1", "--out",
            on.to_str().unwrap(), "--trace", trace.to_str().unwrap(), "--obj-export",
            obj.to_str().unwrap(),
        ])
        .unwrap();
        let refined = dataio::read_dataset(&on).unwrap();
        assert_eq!(refined.len(), 1);
        assert!(
            refined[0].contact.flatten().iter().any(|v| *v != 0.0),
            "refined records carry stage-2 contact predictions"
        );
        let trace_text = std::fs::read_to_string(&trace).unwrap();
        assert!(trace_text.starts_with(&format!("# config {}", c.fingerprint())));
        assert!(trace_text.lines().count() > 2, "trace has step rows");
        let obj_text = std::fs::read_to_string(&obj).unwrap();
        assert!(obj_text.lines().any(|l| l.starts_with("v ")));
        assert!(obj_text.lines().any(|l| l.starts_with("f ")));
        assert!(obj_text.contains("o body_joint_markers"));
        // Mesh vertices + 52 joint markers.
        let vcount = obj_text.lines().filter(|l| l.starts_with("v ")).count();
        let library = ObjectLibrary::load(&c.paths.objects_dir).unwrap();
        let mug = library.get("mug").unwrap();
        assert_eq!(vcount, mug.object.mesh.vertices.len() + 52);
    }

    /// [DERIVED] `evaluate` writes a valid report; evaluating a dataset
    /// against itself yields FID ≤ 1e-6; fewer than three classes is a
    /// configuration error (exit 4).
    #[test]
    fn evaluate_reports_and_guards() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path());
        let cfg_s = cfg.to_str().unwrap();
        let c = tiny_config(dir.path());

        run_args(&["synthgen", "--config", cfg_s]).unwrap();
        run_args(&["train", "--config", cfg_s, "--stage", "classifier"]).unwrap();

        let dataset = c.paths.dataset.to_str().unwrap().to_string();
        let report_path = dir.path().join("report.json");
        run_args(&[
            "evaluate", "--config", cfg_s, "--generated", &dataset, "--reference", &dataset,
            "--out", report_path.to_str().unwrap(),
        ])
        .unwrap();
        let report = MetricReport::from_json(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
        assert!(report.fid <= 1e-6, "identical sets give zero FID, got {}", report.fid);
        assert!((0.0..=1.0).contains(&report.accuracy_top3));
        assert!(report.diversity >= 0.0);
        assert_eq!(report.iv_samples, 3);
        assert_eq!(report.config_fingerprint, c.fingerprint());

        // Two-class classifier: rebuild with only lift/pass records.
        let records = dataio::read_dataset(&c.paths.dataset).unwrap();
        let two: Vec<HOIRecord> = records
            .iter()
            .filter(|r| r.action_id < 2)
            .cloned()
            .collect();
        assert!(two.len() >= 4);
        dataio::write_dataset(&two, &c.paths.dataset).unwrap();
        run_args(&["train", "--config", cfg_s, "--stage", "classifier"]).unwrap();
        let err = run_args(&[
            "evaluate", "--config", cfg_s, "--generated", &dataset, "--reference", &dataset,
        ]);
        assert_eq!(exit_code(err), 4, "top-3 needs at least 3 classes");
    }

    /// [DERIVED] Input errors map to the documented exit codes: bad prompt
    /// 3, missing checkpoint 2, unknown object 4, corrupted dataset magic 3,
    /// unknown ablation 4.
    #[test]
    fn error_paths_use_documented_exit_codes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path());
        let cfg_s = cfg.to_str().unwrap();
        let c = tiny_config(dir.path());

        // Prompt without the "... the <object> with ..." shape: parse error
        // before any checkpoint is touched.
        assert_eq!(
            exit_code(run_args(&["sample", "--config", cfg_s, "--prompt", "gibberish"])),
            3
        );

        // Valid prompt, no trained prior: I/O error.
        run_args(&["synthgen", "--config", cfg_s]).unwrap();
        assert_eq!(
            exit_code(run_args(&[
                "sample", "--config", cfg_s, "--prompt", "lift mug with right hand",
            ])),
            2
        );

        // Unknown object name: configuration error.
        assert_eq!(
            exit_code(run_args(&[
                "sample", "--config", cfg_s, "--prompt", "lift chair with right hand",
            ])),
            4
        );

        // Unknown ablation flag: configuration error.
        assert_eq!(
            exit_code(run_args(&[
                "train", "--config", cfg_s, "--stage", "prior", "--ablate", "everything",
            ])),
            4
        );

        // Corrupted dataset magic: parse error with exit 3.
        let mut bytes = std::fs::read(&c.paths.dataset).unwrap();
        bytes[0] = b'X';
        std::fs::write(&c.paths.dataset, &bytes).unwrap();
        assert_eq!(
            exit_code(run_args(&["train", "--config", cfg_s, "--stage", "classifier"])),
            3
        );

        // Unreadable config file: I/O error; unparseable config: exit 3.
        assert_eq!(
            exit_code(run_args(&["synthgen", "--config", "/nonexistent/config.json"])),
            2
        );
        let bad = dir.path().join("bad.json");
        std::fs::write(&bad, "{not json").unwrap();
        assert_eq!(
            exit_code(run_args(&["synthgen", "--config", bad.to_str().unwrap()])),
            3
        );
    }

    /// [DERIVED] Every gradient oracle passes at the default tolerance; the
    /// op list has no duplicates; an absurd tolerance of 1e-12 fails with a
    /// verification error that names the failing ops.
    #[test]
    fn fdcheck_suite_passes_and_fails_as_specified() {
        let reports = fd_suite().unwrap();
        let mut names: Vec<&str> = reports.iter().map(|r| r.name).collect();
        let total = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), total, "each op listed exactly once");
        assert!(total >= 30, "suite covers every differentiable op");
        for r in &reports {
            assert!(
                r.max_err <= 1e-4,
                "{} exceeds tolerance: {:.3e}",
                r.name,
                r.max_err
            );
        }

        assert!(run_args(&["fdcheck"]).is_ok());
        let err = run_args(&["fdcheck", "--tolerance", "1e-12"]).err().unwrap();
        assert_eq!(err.exit_code(), 1, "FD truncation error exceeds 1e-12");
        let msg = err.to_string();
        assert!(msg.contains("finite-difference check failed"));
    }
}
