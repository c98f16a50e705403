//! Run configuration.
//!
//! Each field resolves from, in order: command-line flag, environment
//! variable `EMOREASON_<FIELD>`, config file, built-in default.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use emoreason_core::corpus::DatasetProfile;
use emoreason_core::pipeline::{PipelineConfig, SelectionParamsConfig};
use serde::{Deserialize, Serialize};

pub const ENV_PREFIX: &str = "EMOREASON_";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Every configuration problem found, reported together.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub struct ConfigErrors(pub Vec<FieldError>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "invalid configuration:")?;
        for e in &self.0 {
            writeln!(f, "  {e}")?;
        }
        Ok(())
    }
}

impl ConfigErrors {
    pub fn fields(&self) -> Vec<&str> {
        self.0.iter().map(|e| e.field.as_str()).collect()
    }
}

fn parse_env<T: FromStr>(field: &str, raw: Option<String>, errors: &mut Vec<FieldError>) -> Option<T>
where
    T::Err: fmt::Display,
{
    let raw = raw?;
    match raw.trim().parse() {
        Ok(v) => Some(v),
        Err(e) => {
            errors.push(FieldError {
                field: field.to_owned(),
                message: format!("{ENV_PREFIX}{} = `{raw}`: {e}", field.to_uppercase()),
            });
            None
        }
    }
}

macro_rules! config_fields {
    (
        defaulted { $( $(#[doc = $ddoc:literal])* $d:ident : $dt:ty = $dv:expr; )* }
        optional { $( $(#[doc = $odoc:literal])* $o:ident : $ot:ty; )* }
    ) => {
        /// One configuration layer; unset fields fall through to the next.
        #[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, clap::Args)]
        #[serde(default, deny_unknown_fields)]
        pub struct PartialConfig {
            $( $(#[doc = $ddoc])* #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")] pub $d: Option<$dt>, )*
            $( $(#[doc = $odoc])* #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")] pub $o: Option<$ot>, )*
        }

        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        pub struct RunConfig {
            $( pub $d: $dt, )*
            $( pub $o: Option<$ot>, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $d: $dv, )* $( $o: None, )* }
            }
        }

        pub const FIELDS: &[&str] = &[ $( stringify!($d), )* $( stringify!($o), )* ];

        impl PartialConfig {
            /// Reads `EMOREASON_<FIELD>` variables through `lookup`.
            pub fn from_env(lookup: &dyn Fn(&str) -> Option<String>) -> (Self, Vec<FieldError>) {
                let mut errors = Vec::new();
                let var = |f: &str| lookup(&format!("{ENV_PREFIX}{}", f.to_uppercase()));
                let layer = Self {
                    $( $d: parse_env(stringify!($d), var(stringify!($d)), &mut errors), )*
                    $( $o: parse_env(stringify!($o), var(stringify!($o)), &mut errors), )*
                };
                (layer, errors)
            }

            /// `self` where set, otherwise `lower`.
            pub fn over(self, lower: Self) -> Self {
                Self {
                    $( $d: self.$d.or(lower.$d), )*
                    $( $o: self.$o.or(lower.$o), )*
                }
            }

            pub fn finish(self) -> RunConfig {
                let d = RunConfig::default();
                RunConfig {
                    $( $d: self.$d.unwrap_or(d.$d), )*
                    $( $o: self.$o, )*
                }
            }
        }
    };
}

config_fields! {
    defaulted {
        /// Dataset profile: isear, emotweets, or a profile file
        profile: String = "isear".into();
        /// Contexts generated per input
        n_contexts: u32 = 10;
        /// Reasoning samples per context
        q_samples: u32 = 10;
        /// Label/explanation pairs kept per input
        k_top: usize = 3;
        /// Nucleus sampling threshold
        nucleus_p: f64 = 0.9;
        /// Token limit per generation
        max_new_tokens: u32 = 60;
        /// Few-shot examples in the context prompt
        few_shot_k: usize = 5;
        /// Similarity needed to merge two label groups
        tau_group: f64 = 0.9;
        /// Backend kind: remote or scripted
        backend: String = "remote".into();
        /// Records processed concurrently
        parallelism: usize = 4;
        /// Response cache directory
        cache_dir: PathBuf = PathBuf::from(".emoreason-cache");
        /// Score labels by mean instead of summed token log-probability
        length_normalize: bool = false;
    }
    optional {
        /// Base URL of the remote completion service
        backend_url: String;
        /// Model name sent to the remote service
        model: String;
        /// Bearer token for the remote service
        api_key: String;
        /// Fixture file for the scripted backend
        script: PathBuf;
        /// Sampling seed forwarded to the backend
        seed: u64;
    }
}

pub fn read_file_layer(path: &Path) -> Result<PartialConfig, ConfigErrors> {
    let fail = |message: String| ConfigErrors(vec![FieldError { field: "config".into(), message }]);
    let text = std::fs::read_to_string(path).map_err(|e| fail(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| fail(format!("{}: {e}", path.display())))
}

/// Merges flag, environment and file layers over the defaults.
pub fn resolve(
    flags: PartialConfig,
    config_file: Option<&Path>,
    lookup: &dyn Fn(&str) -> Option<String>,
) -> Result<RunConfig, ConfigErrors> {
    let (env, mut errors) = PartialConfig::from_env(lookup);
    let file = match config_file {
        Some(p) => match read_file_layer(p) {
            Ok(f) => f,
            Err(e) => {
                errors.extend(e.0);
                PartialConfig::default()
            }
        },
        None => PartialConfig::default(),
    };
    if !errors.is_empty() {
        return Err(ConfigErrors(errors));
    }
    Ok(flags.over(env).over(file).finish())
}

impl RunConfig {
    /// Checks every field and returns all problems at once, along with the
    /// resolved profile when it loads.
    pub fn validate(&self) -> Result<DatasetProfile, ConfigErrors> {
        let mut errors = Vec::new();
        let mut err = |field: &str, message: String| errors.push(FieldError { field: field.into(), message });
        if self.n_contexts == 0 {
            err("n_contexts", "must be at least 1".into());
        }
        if self.q_samples == 0 {
            err("q_samples", "must be at least 1".into());
        }
        if self.k_top == 0 {
            err("k_top", "must be at least 1".into());
        }
        if !(self.nucleus_p > 0.0 && self.nucleus_p <= 1.0) {
            err("nucleus_p", format!("must be in (0, 1], got {}", self.nucleus_p));
        }
        if self.max_new_tokens == 0 {
            err("max_new_tokens", "must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.tau_group) {
            err("tau_group", format!("must be in [0, 1], got {}", self.tau_group));
        }
        if self.parallelism == 0 {
            err("parallelism", "must be at least 1".into());
        }
        match self.backend.as_str() {
            "remote" => {
                if self.backend_url.as_deref().is_none_or(|u| u.trim().is_empty()) {
                    err("backend_url", "required for the remote backend (flag --backend-url or EMOREASON_BACKEND_URL)".into());
                }
            }
            "scripted" => match &self.script {
                None => err("script", "required for the scripted backend".into()),
                Some(p) if !p.is_file() => err("script", format!("{} does not exist", p.display())),
                Some(_) => {}
            },
            other => err("backend", format!("must be remote or scripted, got `{other}`")),
        }
        let profile = match DatasetProfile::resolve(&self.profile) {
            Ok(p) => {
                if self.few_shot_k == 0 || self.few_shot_k > p.prompts.context.k() {
                    err(
                        "few_shot_k",
                        format!("must be in [1, {}] for profile {}, got {}", p.prompts.context.k(), p.name, self.few_shot_k),
                    );
                }
                Some(p)
            }
            Err(e) => {
                err("profile", e.to_string());
                None
            }
        };
        match profile {
            Some(mut p) if errors.is_empty() => {
                p.prompts.context.examples.truncate(self.few_shot_k);
                Ok(p)
            }
            _ => Err(ConfigErrors(errors)),
        }
    }

    pub fn pipeline_config(&self, run_id: String) -> PipelineConfig {
        PipelineConfig {
            n_contexts: self.n_contexts,
            q_samples: self.q_samples,
            nucleus_p: self.nucleus_p,
            max_new_tokens: self.max_new_tokens,
            seed: self.seed,
            selection: SelectionParamsConfig { k: self.k_top, group_threshold: self.tau_group },
            length_normalize: self.length_normalize,
            parallelism: self.parallelism,
            run_id,
        }
    }

    /// Settings that determine output content; excludes credentials and
    /// execution details.
    pub fn fingerprint(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let m = v.as_object_mut().expect("object");
        for k in ["api_key", "parallelism", "cache_dir"] {
            m.remove(k);
        }
        if let Some(script) = &self.script {
            let digest = std::fs::read(script).map(|b| emoreason_core::backend::sha256_hex(&b)).unwrap_or_default();
            m.insert("script".into(), serde_json::Value::String(digest));
        }
        v
    }
}
