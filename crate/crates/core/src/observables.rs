//! Observables `f(x, y)` evaluated along chains.
//!
//! Catalog names, as accepted by [`Observable::parse`]:
//!
//! | name               | value                         |
//! |--------------------|-------------------------------|
//! | `hamiltonian`      | `U(x) + abs(y)^2 / 2`         |
//! | `potential`        | `U(x)`                        |
//! | `kinetic`          | `abs(y)^2 / 2`                |
//! | `first_coordinate` | `x0`                          |
//! | `exp_bh(b)`        | `exp(b H(x, y))`              |
//! | anything else      | polynomial, e.g. `2*x0^2*y1 - 0.5*y0 + 3` |

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::potentials::norm_sq;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Var {
    X(usize),
    Y(usize),
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Var::X(i) => write!(f, "x{i}"),
            Var::Y(i) => write!(f, "y{i}"),
        }
    }
}

/// `coef * prod var^power`, powers sorted by variable.
#[derive(Debug, Clone, PartialEq)]
pub struct Monomial {
    pub coef: f64,
    pub powers: Vec<(Var, u32)>,
}

impl Monomial {
    fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        self.powers.iter().fold(self.coef, |acc, &(v, p)| {
            let base = match v {
                Var::X(i) => x[i],
                Var::Y(i) => y[i],
            };
            acc * base.powi(p as i32)
        })
    }

    fn partial(&self, var: Var) -> Option<Monomial> {
        let pos = self.powers.iter().position(|&(v, _)| v == var)?;
        let mut powers = self.powers.clone();
        let p = powers[pos].1;
        if p == 1 {
            powers.remove(pos);
        } else {
            powers[pos].1 = p - 1;
        }
        Some(Monomial {
            coef: self.coef * p as f64,
            powers,
        })
    }
}

/// Real polynomial in the phase-space coordinates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Polynomial {
    pub terms: Vec<Monomial>,
}

impl Polynomial {
    pub fn constant(c: f64) -> Self {
        Polynomial {
            terms: vec![Monomial {
                coef: c,
                powers: vec![],
            }],
        }
    }

    pub fn monomial(coef: f64, powers: &[(Var, u32)]) -> Self {
        let mut powers: Vec<(Var, u32)> = powers.iter().copied().filter(|p| p.1 > 0).collect();
        powers.sort();
        Polynomial {
            terms: vec![Monomial { coef, powers }],
        }
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        self.terms.iter().map(|t| t.eval(x, y)).sum()
    }

    pub fn partial(&self, var: Var) -> Polynomial {
        Polynomial {
            terms: self.terms.iter().filter_map(|t| t.partial(var)).collect(),
        }
    }

    pub fn degree(&self) -> u32 {
        self.terms
            .iter()
            .map(|t| t.powers.iter().map(|p| p.1).sum())
            .max()
            .unwrap_or(0)
    }

    /// Largest coordinate index used, plus one.
    pub fn min_dim(&self) -> usize {
        self.terms
            .iter()
            .flat_map(|t| t.powers.iter())
            .map(|&(v, _)| match v {
                Var::X(i) | Var::Y(i) => i + 1,
            })
            .max()
            .unwrap_or(0)
    }

    /// Parses sums of monomials such as `2*x0^2*y1 - y0 + 0.5`.
    pub fn parse(src: &str) -> Result<Self> {
        let cleaned: String = src.chars().filter(|c| !c.is_whitespace()).collect();
        if cleaned.is_empty() {
            return Err(Error::invalid("empty polynomial"));
        }
        let mut terms = Vec::new();
        let mut rest = cleaned.as_str();
        while !rest.is_empty() {
            let (sign, body) = match rest.as_bytes()[0] {
                b'+' => (1.0, &rest[1..]),
                b'-' => (-1.0, &rest[1..]),
                _ => (1.0, rest),
            };
            // a term ends at the next +/- not part of an exponent like 1e-3
            let bytes = body.as_bytes();
            let mut end = bytes.len();
            for i in 1..bytes.len() {
                if (bytes[i] == b'+' || bytes[i] == b'-') && !matches!(bytes[i - 1], b'e' | b'E')
                {
                    end = i;
                    break;
                }
            }
            terms.push(parse_term(&body[..end], sign, src)?);
            rest = &body[end..];
        }
        Ok(Polynomial { terms })
    }
}

fn parse_term(term: &str, sign: f64, src: &str) -> Result<Monomial> {
    if term.is_empty() {
        return Err(Error::invalid(format!("malformed polynomial '{src}'")));
    }
    let mut coef = sign;
    let mut powers: BTreeMap<Var, u32> = BTreeMap::new();
    for factor in term.split('*') {
        let (base, exp) = match factor.split_once('^') {
            Some((b, e)) => (
                b,
                e.parse::<u32>()
                    .map_err(|_| Error::invalid(format!("bad exponent in '{src}'")))?,
            ),
            None => (factor, 1),
        };
        let var = match base.as_bytes().first() {
            Some(b'x') => base[1..].parse().ok().map(Var::X),
            Some(b'y') => base[1..].parse().ok().map(Var::Y),
            _ => None,
        };
        match var {
            Some(v) => *powers.entry(v).or_insert(0) += exp,
            None => {
                let c: f64 = base
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad factor '{factor}' in '{src}'")))?;
                coef *= c.powi(exp as i32);
            }
        }
    }
    Ok(Monomial {
        coef,
        powers: powers.into_iter().filter(|p| p.1 > 0).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum ObservableKind {
    Hamiltonian,
    PotentialEnergy,
    KineticEnergy,
    FirstCoordinate,
    /// `exp(b H)`
    ExpBH(f64),
    Polynomial(Polynomial),
}

/// Named observable from the built-in catalog.
#[derive(Debug, Clone, PartialEq)]
pub struct Observable {
    pub name: String,
    pub kind: ObservableKind,
}

impl Observable {
    pub fn new(name: impl Into<String>, kind: ObservableKind) -> Self {
        Observable {
            name: name.into(),
            kind,
        }
    }

    pub fn hamiltonian() -> Self {
        Observable::new("hamiltonian", ObservableKind::Hamiltonian)
    }
    pub fn potential_energy() -> Self {
        Observable::new("potential", ObservableKind::PotentialEnergy)
    }
    pub fn kinetic_energy() -> Self {
        Observable::new("kinetic", ObservableKind::KineticEnergy)
    }
    pub fn first_coordinate() -> Self {
        Observable::new("first_coordinate", ObservableKind::FirstCoordinate)
    }
    pub fn exp_bh(b: f64) -> Self {
        Observable::new(format!("exp_bh({b})"), ObservableKind::ExpBH(b))
    }
    pub fn constant(c: f64) -> Self {
        Observable::new(
            format!("{c}"),
            ObservableKind::Polynomial(Polynomial::constant(c)),
        )
    }
    pub fn polynomial(src: &str) -> Result<Self> {
        Ok(Observable::new(
            src.trim(),
            ObservableKind::Polynomial(Polynomial::parse(src)?),
        ))
    }

    pub fn parse(name: &str) -> Result<Self> {
        let name = name.trim();
        match name {
            "hamiltonian" => Ok(Observable::hamiltonian()),
            "potential" => Ok(Observable::potential_energy()),
            "kinetic" => Ok(Observable::kinetic_energy()),
            "first_coordinate" => Ok(Observable::first_coordinate()),
            _ => {
                if let Some(arg) = name
                    .strip_prefix("exp_bh(")
                    .and_then(|r| r.strip_suffix(')'))
                {
                    let b: f64 = arg
                        .trim()
                        .parse()
                        .map_err(|_| Error::invalid(format!("bad exp_bh parameter in '{name}'")))?;
                    return Ok(Observable::new(name, ObservableKind::ExpBH(b)));
                }
                Observable::polynomial(name)
            }
        }
    }

    /// Checks the observable against the phase-space dimension.
    pub fn validate(&self, dim: usize) -> Result<()> {
        if let ObservableKind::Polynomial(p) = &self.kind {
            if p.min_dim() > dim {
                return Err(Error::invalid(format!(
                    "observable '{}' uses coordinate {} but dimension is {dim}",
                    self.name,
                    p.min_dim() - 1
                )));
            }
        }
        Ok(())
    }

    /// Value at `(x, y)` given the cached potential energy `u = U(x)`.
    #[inline]
    pub fn eval_with_energy(&self, x: &[f64], y: &[f64], u: f64) -> f64 {
        match &self.kind {
            ObservableKind::Hamiltonian => u + 0.5 * norm_sq(y),
            ObservableKind::PotentialEnergy => u,
            ObservableKind::KineticEnergy => 0.5 * norm_sq(y),
            ObservableKind::FirstCoordinate => x[0],
            ObservableKind::ExpBH(b) => (b * (u + 0.5 * norm_sq(y))).exp(),
            ObservableKind::Polynomial(p) => p.eval(x, y),
        }
    }

    /// Polynomial form, when the observable has one (needed for the generator).
    pub fn as_polynomial(&self, dim: usize) -> Option<Polynomial> {
        match &self.kind {
            ObservableKind::FirstCoordinate => Some(Polynomial::monomial(1.0, &[(Var::X(0), 1)])),
            ObservableKind::KineticEnergy => Some(Polynomial {
                terms: (0..dim)
                    .map(|i| Monomial {
                        coef: 0.5,
                        powers: vec![(Var::Y(i), 2)],
                    })
                    .collect(),
            }),
            ObservableKind::Polynomial(p) => Some(p.clone()),
            _ => None,
        }
    }

    /// `Some(c)` for constant observables.
    pub fn constant_value(&self) -> Option<f64> {
        match &self.kind {
            ObservableKind::Polynomial(p) if p.degree() == 0 => {
                Some(p.terms.iter().map(|t| t.coef).sum())
            }
            _ => None,
        }
    }
}
