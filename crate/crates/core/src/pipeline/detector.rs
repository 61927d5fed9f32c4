use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{PipelineError, StepFeatures};

/// What a detector sees when scoring step `step` of a trajectory.
#[derive(Debug, Clone, Serialize)]
pub struct DetectorRequest<'a> {
    pub traj_id: &'a str,
    pub step: usize,
    pub query: &'a str,
    /// Step texts up to and including `step`.
    pub steps: &'a [String],
    pub features: StepFeatures,
}

/// Scores a step's faithfulness confidence s_det ∈ [0, 1].
pub trait Detector: Sync {
    fn score(&self, request: &DetectorRequest<'_>) -> Result<f64, PipelineError>;
}

/// Logistic model over (ρ, s_temp, d_FR, U). Inputs are standardized with
/// stored statistics before the linear layer. The ρ and s_temp weights are
/// kept nonnegative, so the score is nondecreasing in both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineDetector {
    pub trained: bool,
    pub feature_mean: [f64; 4],
    pub feature_scale: [f64; 4],
    pub weights: [f64; 4],
    pub bias: f64,
}

impl BaselineDetector {
    pub fn untrained() -> Self {
        BaselineDetector {
            trained: false,
            feature_mean: [0.0; 4],
            feature_scale: [1.0; 4],
            weights: [0.0; 4],
            bias: 0.0,
        }
    }

    /// A trained model with the given raw-feature weights and no standardization.
    pub fn with_weights(weights: [f64; 4], bias: f64) -> Self {
        BaselineDetector {
            trained: true,
            weights,
            bias,
            ..Self::untrained()
        }
    }

    fn logit(&self, x: [f64; 4]) -> f64 {
        self.weights
            .iter()
            .zip(x)
            .zip(self.feature_mean.iter().zip(&self.feature_scale))
            .fold(self.bias, |z, ((w, xi), (m, s))| z + w * (xi - m) / s)
    }

    pub fn probability(&self, features: &StepFeatures) -> Result<f64, PipelineError> {
        if !self.trained {
            return Err(PipelineError::UntrainedDetector);
        }
        Ok(sigmoid(self.logit(features.to_array())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("detector serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(text).map_err(|e| PipelineError::InvalidConfig(format!("detector weights: {e}")))
    }
}

impl Detector for BaselineDetector {
    fn score(&self, request: &DetectorRequest<'_>) -> Result<f64, PipelineError> {
        self.probability(&request.features)
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorTraining {
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for DetectorTraining {
    fn default() -> Self {
        DetectorTraining {
            iterations: 2000,
            learning_rate: 0.5,
            l2: 1e-3,
        }
    }
}

/// Full-batch projected gradient descent on the mean logistic loss.
/// `samples` pairs features with `true` for faithful steps.
pub fn train_baseline(
    samples: &[(StepFeatures, bool)],
    config: &DetectorTraining,
) -> Result<BaselineDetector, PipelineError> {
    let n = samples.len();
    let positives = samples.iter().filter(|s| s.1).count();
    if n == 0 || positives == 0 || positives == n {
        return Err(PipelineError::DegenerateTrainingSet);
    }
    let xs: Vec<[f64; 4]> = samples.iter().map(|s| s.0.to_array()).collect();
    let mut mean = [0.0; 4];
    let mut scale = [0.0; 4];
    for i in 0..4 {
        mean[i] = xs.iter().map(|x| x[i]).sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x[i] - mean[i]).powi(2)).sum::<f64>() / n as f64;
        scale[i] = if var > 0.0 { var.sqrt() } else { 1.0 };
    }
    let z: Vec<[f64; 4]> = xs
        .iter()
        .map(|x| std::array::from_fn(|i| (x[i] - mean[i]) / scale[i]))
        .collect();
    let mut w = [0.0; 4];
    let mut b = 0.0;
    for _ in 0..config.iterations {
        let mut gw = [0.0; 4];
        let mut gb = 0.0;
        for (zi, (_, y)) in z.iter().zip(samples) {
            let p = sigmoid(b + (0..4).map(|i| w[i] * zi[i]).sum::<f64>());
            let r = p - if *y { 1.0 } else { 0.0 };
            for i in 0..4 {
                gw[i] += r * zi[i];
            }
            gb += r;
        }
        for i in 0..4 {
            w[i] -= config.learning_rate * (gw[i] / n as f64 + config.l2 * w[i]);
        }
        b -= config.learning_rate * gb / n as f64;
        // Monotone in ρ and s_temp.
        w[0] = w[0].max(0.0);
        w[1] = w[1].max(0.0);
    }
    Ok(BaselineDetector {
        trained: true,
        feature_mean: mean,
        feature_scale: scale,
        weights: w,
        bias: b,
    })
}

#[derive(Deserialize)]
struct DetectorResponse {
    score: f64,
}

struct Channel {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// Detector running in a child process. Each request is one JSON line on the
/// child's stdin; the child answers with one line `{"score": <f64>}`.
pub struct ProcessDetector {
    channel: Mutex<Channel>,
}

impl ProcessDetector {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self, PipelineError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| PipelineError::DetectorProcess(format!("cannot start {program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(ProcessDetector {
            channel: Mutex::new(Channel { child, stdin, stdout }),
        })
    }
}

impl Detector for ProcessDetector {
    fn score(&self, request: &DetectorRequest<'_>) -> Result<f64, PipelineError> {
        let fail = |m: String| PipelineError::DetectorProcess(m);
        let mut ch = self
            .channel
            .lock()
            .map_err(|_| fail("detector channel poisoned".into()))?;
        let line = serde_json::to_string(request).expect("request serializes");
        writeln!(ch.stdin, "{line}").map_err(|e| fail(e.to_string()))?;
        ch.stdin.flush().map_err(|e| fail(e.to_string()))?;
        let mut reply = String::new();
        let read = ch.stdout.read_line(&mut reply).map_err(|e| fail(e.to_string()))?;
        if read == 0 {
            return Err(fail("child closed its output".into()));
        }
        let resp: DetectorResponse =
            serde_json::from_str(reply.trim()).map_err(|e| fail(format!("bad reply {:?}: {e}", reply.trim())))?;
        if !(0.0..=1.0).contains(&resp.score) {
            return Err(PipelineError::OutOfRange {
                name: "s_det",
                value: resp.score,
            });
        }
        Ok(resp.score)
    }
}

impl Drop for ProcessDetector {
    fn drop(&mut self) {
        if let Ok(ch) = self.channel.get_mut() {
            let _ = ch.child.kill();
            let _ = ch.child.wait();
        }
    }
}
