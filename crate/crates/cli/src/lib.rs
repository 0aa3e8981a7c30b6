//! Command-line front end: `explain`, `list-layers` and `make-fixture`.
//!
//! Exit codes: 0 on success, 1 for usage errors, 2 for data or model errors.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use smoothcam::imageio::{heatmap_image, write_map_csv};
use smoothcam::modelio::DETECTOR_SQUARE;
use smoothcam::{
    build_fixture, detector_input, list_conv_layers, load_model, overlay, random_input, read_ppm,
    run, save_model, to_input_tensor, write_ppm, ActivationSource, ClassTarget, FixtureKind,
    Method, NeuronSelection, RgbImage, SaliencyMap, SaliencyRequest, ScoreKind, ScoreMode,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "smoothcam", version, about = "Saliency maps for small CNNs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute a saliency map for one image and write heatmap, overlay and CSV.
    Explain(ExplainArgs),
    /// Print the conv layer names of a model, one per line.
    ListLayers(ModelArgs),
    /// Write a built-in fixture model (and optionally a sample image).
    MakeFixture(FixtureArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Model manifest (JSON).
    #[arg(long)]
    pub model: PathBuf,
    /// Weight blob (little-endian f32).
    #[arg(long)]
    pub weights: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Sensitivity,
    Smoothgrad,
    Gradcam,
    Gradcampp,
    SmoothGradcampp,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Sensitivity => Method::Sensitivity,
            MethodArg::Smoothgrad => Method::SmoothGrad,
            MethodArg::Gradcam => Method::GradCam,
            MethodArg::Gradcampp => Method::GradCamPlusPlus,
            MethodArg::SmoothGradcampp => Method::SmoothGradCamPlusPlus,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScoreArg {
    Logit,
    Exp,
}

impl From<ScoreArg> for ScoreKind {
    fn from(s: ScoreArg) -> Self {
        match s {
            ScoreArg::Logit => ScoreKind::RawLogit,
            ScoreArg::Exp => ScoreKind::ExpLogit,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SourceArg {
    Original,
    Averaged,
}

impl From<SourceArg> for ActivationSource {
    fn from(s: SourceArg) -> Self {
        match s {
            SourceArg::Original => ActivationSource::Original,
            SourceArg::Averaged => ActivationSource::Averaged,
        }
    }
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Input image (binary PPM, sized to the model input).
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, value_enum, default_value = "smooth-gradcampp")]
    pub method: MethodArg,
    /// Target class index, or `auto` for the top prediction.
    #[arg(long, default_value = "auto", value_parser = parse_class)]
    pub class: ClassTarget,
    /// Conv layer to explain (defaults to the last conv layer).
    #[arg(long)]
    pub layer: Option<String>,
    /// Number of noisy samples for the smoothed methods.
    #[arg(long, default_value_t = smoothcam::saliency::DEFAULT_SAMPLES)]
    pub samples: usize,
    /// Noise std as a fraction of the image's value range.
    #[arg(long, default_value_t = smoothcam::saliency::DEFAULT_SIGMA_REL)]
    pub sigma: f64,
    /// Feature-map indices, e.g. `0,2,3`. Each also gets its own heatmap.
    #[arg(long, value_parser = parse_filters)]
    pub filters: Option<Filters>,
    /// Neuron coordinates `r1:c1,r2:c2`; all other positions are zeroed.
    #[arg(long, value_parser = parse_neurons, conflicts_with = "region_box")]
    pub neurons: Option<Coords>,
    /// Inclusive neuron region `top:left:bottom:right`.
    #[arg(long, value_parser = parse_region)]
    pub region_box: Option<RegionBox>,
    #[arg(long, value_enum, default_value = "original")]
    pub activation_source: SourceArg,
    #[arg(long, value_enum, default_value = "exp")]
    pub score: ScoreArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Heat weight in the overlay, 0 = image only, 1 = heat only.
    #[arg(long, default_value_t = 0.5, value_parser = parse_blend)]
    pub blend: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FixtureArg {
    Random,
    Detector,
}

#[derive(Debug, Args)]
pub struct FixtureArgs {
    #[arg(long, value_enum, default_value = "random")]
    pub kind: FixtureArg,
    /// Weight seed for the random fixture (also seeds its sample image).
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Class count for the random fixture (2..=10).
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    /// Top-left corner `row:col` of the detector sample image's square.
    #[arg(long, value_parser = parse_coord, default_value = "4:4")]
    pub square_at: (usize, usize),
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    /// Also write a sample input image here.
    #[arg(long)]
    pub image: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Filters(pub Vec<usize>);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Coords(pub Vec<(usize, usize)>);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionBox(pub [usize; 4]);

fn parse_class(s: &str) -> Result<ClassTarget, String> {
    s.parse().map_err(|e: smoothcam::Error| e.to_string())
}

fn parse_filters(s: &str) -> Result<Filters, String> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| format!("bad filter index {p:?}"))
        })
        .collect::<Result<_, _>>()
        .map(Filters)
}

fn parse_coord(s: &str) -> Result<(usize, usize), String> {
    let (r, c) = s
        .split_once(':')
        .ok_or_else(|| format!("expected row:col, got {s:?}"))?;
    let num = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| format!("bad coordinate {s:?}"))
    };
    Ok((num(r)?, num(c)?))
}

fn parse_neurons(s: &str) -> Result<Coords, String> {
    if s.trim().is_empty() {
        return Ok(Coords(Vec::new()));
    }
    s.split(',')
        .map(parse_coord)
        .collect::<Result<_, _>>()
        .map(Coords)
}

fn parse_region(s: &str) -> Result<RegionBox, String> {
    let parts: Vec<usize> = s
        .split(':')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| format!("expected top:left:bottom:right, got {s:?}"))?;
    let [top, left, bottom, right] = parts[..] else {
        return Err(format!("expected top:left:bottom:right, got {s:?}"));
    };
    if top > bottom || left > right {
        return Err(format!("region {s} has top > bottom or left > right"));
    }
    Ok(RegionBox([top, left, bottom, right]))
}

fn parse_blend(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("bad blend {s:?}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("blend must lie in [0, 1], got {v}"))
    }
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(smoothcam::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "usage error: {msg}"),
            CliError::Data(e) => write!(f, "error: {e}"),
        }
    }
}

impl From<smoothcam::Error> for CliError {
    fn from(e: smoothcam::Error) -> Self {
        CliError::Data(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
        }
    }
}

impl ExplainArgs {
    fn request(&self) -> Result<SaliencyRequest, CliError> {
        if self.samples == 0 {
            return Err(CliError::Usage("--samples must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.sigma) {
            return Err(CliError::Usage(format!(
                "--sigma must lie in [0, 1), got {}",
                self.sigma
            )));
        }
        let neurons = match (&self.neurons, &self.region_box) {
            (Some(c), None) => Some(NeuronSelection::Coords(c.0.clone())),
            (None, Some(RegionBox([top, left, bottom, right]))) => Some(NeuronSelection::Region {
                top: *top,
                left: *left,
                bottom: *bottom,
                right: *right,
            }),
            (None, None) => None,
            (Some(_), Some(_)) => {
                return Err(CliError::Usage(
                    "--neurons and --region-box are exclusive".into(),
                ))
            }
        };
        let method = Method::from(self.method);
        if !method.is_cam() && (self.filters.is_some() || neurons.is_some()) {
            return Err(CliError::Usage(format!(
                "--filters/--neurons/--region-box need a CAM method, not {method}"
            )));
        }
        Ok(SaliencyRequest {
            method,
            score: ScoreMode::new(self.score.into(), self.class),
            layer: self.layer.clone(),
            samples: self.samples,
            sigma_rel: self.sigma,
            filters: self.filters.as_ref().map(|f| f.0.clone()),
            neurons,
            activation_source: self.activation_source.into(),
            seed: self.seed,
        })
    }

    /// Header line echoing every flag as given.
    fn flag_echo(&self) -> String {
        let list = |v: &[String]| {
            if v.is_empty() {
                "-".to_string()
            } else {
                v.join(",")
            }
        };
        let filters = self.filters.as_ref().map_or("-".into(), |f| {
            list(&f.0.iter().map(usize::to_string).collect::<Vec<_>>())
        });
        let neurons = self.neurons.as_ref().map_or("-".into(), |c| {
            if c.0.is_empty() {
                "[]".to_string()
            } else {
                list(
                    &c.0.iter()
                        .map(|(r, c)| format!("{r}:{c}"))
                        .collect::<Vec<_>>(),
                )
            }
        });
        let region = self.region_box.map_or("-".into(), |RegionBox(b)| {
            format!("{}:{}:{}:{}", b[0], b[1], b[2], b[3])
        });
        format!(
            "flags: method={} class={} layer={} samples={} sigma={} filters={filters} neurons={neurons} \
             region_box={region} activation_source={} score={} seed={} blend={}",
            Method::from(self.method),
            self.class,
            self.layer.as_deref().unwrap_or("-"),
            self.samples,
            self.sigma,
            ActivationSource::from(self.activation_source),
            ScoreKind::from(self.score),
            self.seed,
            self.blend,
        )
    }
}

fn explain(args: &ExplainArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let request = args.request()?;
    let model = load_model(&args.model.model, &args.model.weights)?;
    let image = read_ppm(&args.image)?;
    let input = to_input_tensor(&image, model.input_shape())?;
    let map = run(&model, &input, &request)?;

    let mut per_filter: Vec<(usize, SaliencyMap)> = Vec::new();
    if let Some(filters) = &request.filters {
        for &k in filters {
            let single = SaliencyRequest {
                filters: Some(vec![k]),
                ..request.clone()
            };
            per_filter.push((k, run(&model, &input, &single)?));
        }
    }

    // Everything is computed; only now touch the output directory.
    let heat = heatmap_image(&map.display)?;
    let blended = overlay(&image, &map.display, args.blend)?;
    let header = [map.meta.to_string(), args.flag_echo()];
    let out = &args.out;
    fs::create_dir_all(out).map_err(|e| smoothcam::Error::Io {
        path: out.clone(),
        source: e,
    })?;
    write_ppm(&heat, out.join("heatmap.ppm"))?;
    write_ppm(&blended, out.join("overlay.ppm"))?;
    write_map_csv(&map.display, &header, out.join("map.csv"))?;
    for (k, m) in &per_filter {
        write_ppm(
            &heatmap_image(&m.display)?,
            out.join(format!("heatmap_f{k}.ppm")),
        )?;
    }

    let probability = {
        let trace = smoothcam::forward(&model, &input)?;
        trace.probabilities[map.meta.class]
    };
    let _ = writeln!(
        stdout,
        "class: {}\nscore ({}): {:.9e}\nprobability: {:.9}\noutput: {}",
        map.meta.class,
        map.meta.score_kind,
        map.meta.class_score,
        probability,
        out.display()
    );
    Ok(())
}

fn list_layers(args: &ModelArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let model = load_model(&args.model, &args.weights)?;
    for name in list_conv_layers(&model) {
        let _ = writeln!(stdout, "{name}");
    }
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| smoothcam::Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    Ok(())
}

fn make_fixture(args: &FixtureArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let kind = match args.kind {
        FixtureArg::Random => FixtureKind::Random {
            seed: args.seed,
            classes: args.classes,
        },
        FixtureArg::Detector => FixtureKind::Detector,
    };
    let model = build_fixture(&kind).map_err(|e| CliError::Usage(e.to_string()))?;
    let sample = match args.kind {
        FixtureArg::Random => random_input(&model, args.seed),
        FixtureArg::Detector => {
            let (r, c) = args.square_at;
            detector_input(r, c).map_err(|e| CliError::Usage(e.to_string()))?
        }
    };
    ensure_parent(&args.model)?;
    ensure_parent(&args.weights)?;
    save_model(&model, &args.model, &args.weights)?;
    let _ = writeln!(
        stdout,
        "model: {}\nweights: {}",
        args.model.display(),
        args.weights.display()
    );
    if let Some(path) = &args.image {
        ensure_parent(path)?;
        write_ppm(&RgbImage::from_gray(&sample)?, path)?;
        let _ = writeln!(stdout, "image: {}", path.display());
        if args.kind == FixtureArg::Detector {
            let (r, c) = args.square_at;
            let _ = writeln!(
                stdout,
                "square: rows {r}..{} cols {c}..{}",
                r + DETECTOR_SQUARE,
                c + DETECTOR_SQUARE
            );
        }
    }
    Ok(())
}

pub fn execute(cli: &Cli, stdout: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Explain(args) => explain(args, stdout),
        Command::ListLayers(args) => list_layers(args, stdout),
        Command::MakeFixture(args) => make_fixture(args, stdout),
    }
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code. Messages go to the given writers.
pub fn run_cli<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{e}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(stderr, "{e}");
                    EXIT_USAGE
                }
            };
        }
    };
    match execute(&cli, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "{e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_parsers() {
        assert_eq!(parse_filters("0, 2,3").unwrap(), Filters(vec![0, 2, 3]));
        assert!(parse_filters("0,x").is_err());
        assert_eq!(
            parse_neurons("3:5,5:5").unwrap(),
            Coords(vec![(3, 5), (5, 5)])
        );
        assert_eq!(parse_neurons("").unwrap(), Coords(vec![]));
        assert!(parse_neurons("3-5").is_err());
        assert_eq!(parse_region("1:2:3:4").unwrap(), RegionBox([1, 2, 3, 4]));
        assert!(parse_region("3:0:1:4").is_err());
        assert!(parse_region("1:2:3").is_err());
        assert!(parse_blend("1.5").is_err());
        assert_eq!(parse_class("auto").unwrap(), ClassTarget::Auto);
    }

    #[test]
    fn neurons_conflict_with_region() {
        let argv = [
            "smoothcam",
            "explain",
            "--model",
            "m",
            "--weights",
            "w",
            "--image",
            "i",
            "--out",
            "o",
            "--neurons",
            "1:1",
            "--region-box",
            "0:0:1:1",
        ];
        let (mut out, mut err) = (Vec::new(), Vec::new());
        assert_eq!(run_cli(argv, &mut out, &mut err), EXIT_USAGE);
    }

    #[test]
    fn help_exits_cleanly() {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        assert_eq!(
            run_cli(["smoothcam", "--help"], &mut out, &mut err),
            EXIT_OK
        );
        assert!(String::from_utf8(out).unwrap().contains("explain"));
    }
}
