//! `key = value` run configuration files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{load_csv, load_idx, make_blobs, BlobSpec, Dataset};
use crate::model::{ModelConfig, PatchGrid};
use crate::trainer::RunConfig;

use super::CliError;

/// Where the images come from.
#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    Blobs {
        per_cluster: usize,
        sigma: f64,
        separation: f64,
        dim: usize,
    },
    Idx {
        images: PathBuf,
        labels: Option<PathBuf>,
    },
    Csv {
        path: PathBuf,
        channels: usize,
        height: usize,
        width: usize,
    },
}

/// Dataset source plus the subsetting and resizing applied after loading.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSpec {
    pub source: Source,
    pub classes: Option<Vec<usize>>,
    /// Images kept per class, in file order.
    pub limit: Option<usize>,
    /// Square side length to resize to.
    pub resize: Option<usize>,
}

impl DataSpec {
    /// Loads the dataset; blobs are drawn from `seed`.
    pub fn load(&self, clusters: usize, seed: u64) -> crate::Result<Dataset> {
        let mut data = match &self.source {
            Source::Blobs {
                per_cluster,
                sigma,
                separation,
                dim,
            } => make_blobs(&BlobSpec::ring(clusters, *per_cluster, *sigma, *separation, *dim, seed))?,
            Source::Idx { images, labels } => load_idx(images, labels.as_deref())?,
            Source::Csv {
                path,
                channels,
                height,
                width,
            } => load_csv(path, *channels, *height, *width)?,
        };
        if let Some(classes) = &self.classes {
            data = data.select_classes(classes)?;
        }
        if let Some(limit) = self.limit {
            data = data.limit_per_class(limit)?;
        }
        if let Some(side) = self.resize {
            data = data.resized(side, side)?;
        }
        Ok(data)
    }
}

/// Architecture keys; the image grid comes from the data.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSettings {
    pub embed_dim: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub heads: Option<usize>,
    pub hidden: Vec<usize>,
    pub reduction_hidden: Vec<usize>,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let base = ModelConfig::new(PatchGrid {
            channels: 1,
            height: 4,
            width: 4,
        });
        ModelSettings {
            embed_dim: base.embed_dim,
            encoder_blocks: base.encoder_blocks,
            decoder_blocks: base.decoder_blocks,
            heads: base.heads,
            hidden: base.hidden,
            reduction_hidden: base.reduction_hidden,
        }
    }
}

impl ModelSettings {
    pub fn model_config(&self, grid: PatchGrid, use_transformer: bool) -> ModelConfig {
        ModelConfig {
            grid,
            embed_dim: self.embed_dim,
            encoder_blocks: self.encoder_blocks,
            decoder_blocks: self.decoder_blocks,
            heads: self.heads,
            hidden: self.hidden.clone(),
            reduction_hidden: self.reduction_hidden.clone(),
            use_transformer,
        }
    }
}

/// A parsed configuration file.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub run: RunConfig,
    pub model: ModelSettings,
    pub data: DataSpec,
    pub out: Option<PathBuf>,
}

#[derive(Default)]
struct Raw {
    dataset: Option<String>,
    images: Option<PathBuf>,
    labels: Option<PathBuf>,
    csv: Option<PathBuf>,
    channels: Option<usize>,
    height: Option<usize>,
    width: Option<usize>,
    blob_per_cluster: Option<usize>,
    blob_sigma: Option<f64>,
    blob_separation: Option<f64>,
    blob_dim: Option<usize>,
    clusters: Option<usize>,
}

fn value<T: std::str::FromStr>(key: &str, v: &str, line: usize) -> Result<T, CliError> {
    v.parse()
        .map_err(|_| CliError::Usage(format!("line {}: cannot parse `{}` for key `{}`", line, v, key)))
}

fn list(key: &str, v: &str, line: usize) -> Result<Vec<usize>, CliError> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| value(key, s.trim(), line)).collect()
}

fn auto_or<T: std::str::FromStr>(key: &str, v: &str, line: usize) -> Result<Option<T>, CliError> {
    if v == "auto" {
        Ok(None)
    } else {
        value(key, v, line).map(Some)
    }
}

fn missing(key: &str, dataset: &str) -> CliError {
    CliError::Usage(format!("missing required key `{}` for dataset = {}", key, dataset))
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl Settings {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {}", path.display(), e)))?;
        Settings::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut run = RunConfig::default();
        let mut model = ModelSettings::default();
        let mut raw = Raw::default();
        let mut classes = None;
        let mut limit = None;
        let mut resize = None;
        let mut out = None;
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("line {}: expected `key = value`", n)))?;
            let (key, v) = (key.trim(), v.trim());
            match key {
                "alpha" => run.alpha = value(key, v, n)?,
                "beta" => run.beta = value(key, v, n)?,
                "k" => run.k = value(key, v, n)?,
                "clusters" => raw.clusters = Some(value(key, v, n)?),
                "neighbor_fraction" => run.neighbor_fraction = value(key, v, n)?,
                "epsilon" => run.epsilon = value(key, v, n)?,
                "lr" => run.lr = value(key, v, n)?,
                "batch_size" => run.batch_size = value(key, v, n)?,
                "pretrain_epochs" => run.pretrain_epochs = value(key, v, n)?,
                "max_iter" => run.max_iter = value(key, v, n)?,
                "seed" => run.seed = value(key, v, n)?,
                "perplexity" => run.perplexity = auto_or(key, v, n)?,
                "use_transformer" => run.use_transformer = value(key, v, n)?,
                "use_clustering_head" => run.use_clustering_head = value(key, v, n)?,
                "use_dim_reduction" => run.use_dim_reduction = value(key, v, n)?,
                "augment" => run.augment = value(key, v, n)?,
                "embed_dim" => model.embed_dim = value(key, v, n)?,
                "encoder_blocks" => model.encoder_blocks = value(key, v, n)?,
                "decoder_blocks" => model.decoder_blocks = value(key, v, n)?,
                "heads" => model.heads = auto_or(key, v, n)?,
                "hidden" => model.hidden = list(key, v, n)?,
                "reduction_hidden" => model.reduction_hidden = list(key, v, n)?,
                "dataset" => raw.dataset = Some(v.to_string()),
                "images" => raw.images = Some(v.into()),
                "labels" => raw.labels = Some(v.into()),
                "csv" => raw.csv = Some(v.into()),
                "channels" => raw.channels = Some(value(key, v, n)?),
                "height" => raw.height = Some(value(key, v, n)?),
                "width" => raw.width = Some(value(key, v, n)?),
                "resize" => resize = auto_or(key, v, n)?,
                "classes" => classes = Some(list(key, v, n)?),
                "limit" => limit = auto_or(key, v, n)?,
                "blob_per_cluster" => raw.blob_per_cluster = Some(value(key, v, n)?),
                "blob_sigma" => raw.blob_sigma = Some(value(key, v, n)?),
                "blob_separation" => raw.blob_separation = Some(value(key, v, n)?),
                "blob_dim" => raw.blob_dim = Some(value(key, v, n)?),
                "out" => out = Some(PathBuf::from(v)),
                other => return Err(CliError::Usage(format!("line {}: unknown key `{}`", n, other))),
            }
        }
        run.clusters = raw
            .clusters
            .ok_or_else(|| CliError::Usage("missing required key `clusters`".into()))?;
        let kind = raw
            .dataset
            .ok_or_else(|| CliError::Usage("missing required key `dataset`".into()))?;
        let source = match kind.as_str() {
            "blobs" => Source::Blobs {
                per_cluster: raw.blob_per_cluster.unwrap_or(200),
                sigma: raw.blob_sigma.unwrap_or(0.1),
                separation: raw.blob_separation.unwrap_or(2.0),
                dim: raw.blob_dim.unwrap_or(256),
            },
            "idx" => Source::Idx {
                images: raw.images.ok_or_else(|| missing("images", "idx"))?,
                labels: raw.labels,
            },
            "csv" => Source::Csv {
                path: raw.csv.ok_or_else(|| missing("csv", "csv"))?,
                channels: raw.channels.unwrap_or(1),
                height: raw.height.ok_or_else(|| missing("height", "csv"))?,
                width: raw.width.ok_or_else(|| missing("width", "csv"))?,
            },
            other => {
                return Err(CliError::Usage(format!(
                    "dataset must be blobs, idx or csv, got `{}`",
                    other
                )))
            }
        };
        run.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(Settings {
            run,
            model,
            data: DataSpec {
                source,
                classes,
                limit,
                resize,
            },
            out,
        })
    }

    /// Text that [`Settings::parse`] maps back to `self`.
    pub fn to_text(&self) -> String {
        let r = &self.run;
        let m = &self.model;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{} = {}", k, v);
        };
        put("alpha", format!("{:?}", r.alpha));
        put("beta", format!("{:?}", r.beta));
        put("k", r.k.to_string());
        put("clusters", r.clusters.to_string());
        put("neighbor_fraction", format!("{:?}", r.neighbor_fraction));
        put("epsilon", format!("{:?}", r.epsilon));
        put("lr", format!("{:?}", r.lr));
        put("batch_size", r.batch_size.to_string());
        put("pretrain_epochs", r.pretrain_epochs.to_string());
        put("max_iter", r.max_iter.to_string());
        put("seed", r.seed.to_string());
        put("perplexity", r.perplexity.map_or("auto".into(), |p| format!("{:?}", p)));
        put("use_transformer", r.use_transformer.to_string());
        put("use_clustering_head", r.use_clustering_head.to_string());
        put("use_dim_reduction", r.use_dim_reduction.to_string());
        put("augment", r.augment.to_string());
        put("embed_dim", m.embed_dim.to_string());
        put("encoder_blocks", m.encoder_blocks.to_string());
        put("decoder_blocks", m.decoder_blocks.to_string());
        put("heads", m.heads.map_or("auto".into(), |h| h.to_string()));
        put("hidden", join(&m.hidden));
        put("reduction_hidden", join(&m.reduction_hidden));
        match &self.data.source {
            Source::Blobs {
                per_cluster,
                sigma,
                separation,
                dim,
            } => {
                put("dataset", "blobs".into());
                put("blob_per_cluster", per_cluster.to_string());
                put("blob_sigma", format!("{:?}", sigma));
                put("blob_separation", format!("{:?}", separation));
                put("blob_dim", dim.to_string());
            }
            Source::Idx { images, labels } => {
                put("dataset", "idx".into());
                put("images", images.display().to_string());
                if let Some(l) = labels {
                    put("labels", l.display().to_string());
                }
            }
            Source::Csv {
                path,
                channels,
                height,
                width,
            } => {
                put("dataset", "csv".into());
                put("csv", path.display().to_string());
                put("channels", channels.to_string());
                put("height", height.to_string());
                put("width", width.to_string());
            }
        }
        if let Some(c) = &self.data.classes {
            put("classes", join(c));
        }
        if let Some(l) = self.data.limit {
            put("limit", l.to_string());
        }
        if let Some(r) = self.data.resize {
            put("resize", r.to_string());
        }
        if let Some(o) = &self.out {
            put("out", o.display().to_string());
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_round_trip() {
        let s = Settings::parse("# demo\ndataset = blobs\nclusters = 3\nbeta=0.01  # inline\nperplexity = 12.5\nhidden = 64,32\n").unwrap();
        assert_eq!(s.run.alpha, 0.1);
        assert_eq!(s.run.beta, 0.01);
        assert_eq!(s.run.perplexity, Some(12.5));
        assert_eq!(s.model.hidden, vec![64, 32]);
        assert_eq!(Settings::parse(&s.to_text()).unwrap(), s);
    }

    #[test]
    fn errors_name_the_key() {
        let e = Settings::parse("dataset = idx\nclusters = 2\n").unwrap_err();
        assert!(e.to_string().contains("`images`"));
        let e = Settings::parse("dataset = blobs\n").unwrap_err();
        assert!(e.to_string().contains("`clusters`"));
        let e = Settings::parse("dataset = blobs\nclusters = 2\ngamma = 1\n").unwrap_err();
        assert!(e.to_string().contains("`gamma`"));
        assert!(Settings::parse("dataset = blobs\nclusters = 2\nepsilon = 2\n").is_err());
    }
}
