//! Yes-probability extraction from first-answer-token log-probabilities.
//!
//! Only the "Yes" and "No" tokens take part: `p = e^yes / (e^yes + e^no)`.
//! Tokens are matched after stripping leading whitespace and BPE/sentencepiece
//! space markers and lowercasing, so `" Yes"`, `"YES"` and `"Ġyes"` all count
//! toward the yes option. Several variants of one option are combined with
//! log-sum-exp.

/// `e^lp_yes / (e^lp_yes + e^lp_no)`, evaluated as a logistic of the
/// difference so that `-inf` on either side gives an exact 0 or 1.
pub fn two_token_softmax(lp_yes: f64, lp_no: f64) -> f64 {
    if lp_yes == f64::NEG_INFINITY && lp_no == f64::NEG_INFINITY {
        return 0.5;
    }
    1.0 / (1.0 + (lp_no - lp_yes).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Answer {
    Yes,
    No,
}

fn classify(token: &str) -> Option<Answer> {
    let t = token.trim_start_matches(|c: char| c.is_whitespace() || c == 'Ġ' || c == '▁');
    let t = t.trim_end().to_lowercase();
    match t.as_str() {
        "yes" => Some(Answer::Yes),
        "no" => Some(Answer::No),
        _ => None,
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Yes-probability from `(token, logprob)` alternatives of the first answer
/// token. `None` when neither option appears.
pub fn yes_probability<'a>(alternatives: impl IntoIterator<Item = (&'a str, f64)>) -> Option<f64> {
    let mut yes = f64::NEG_INFINITY;
    let mut no = f64::NEG_INFINITY;
    let mut seen = false;
    for (token, lp) in alternatives {
        match classify(token) {
            Some(Answer::Yes) => {
                yes = log_add(yes, lp);
                seen = true;
            }
            Some(Answer::No) => {
                no = log_add(no, lp);
                seen = true;
            }
            None => {}
        }
    }
    seen.then(|| two_token_softmax(yes, no))
}

/// Fallback when no log-probabilities are available: a text answer starting
/// with Yes maps to 1.0, No to 0.0.
pub fn parse_yes_no(text: &str) -> Option<f64> {
    let first = text
        .trim()
        .split(|c: char| !c.is_alphanumeric())
        .find(|w| !w.is_empty())?;
    match classify(first)? {
        Answer::Yes => Some(1.0),
        Answer::No => Some(0.0),
    }
}
