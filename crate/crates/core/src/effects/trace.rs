use indexmap::IndexMap;

use crate::distributions::Distribution;
use crate::error::{PplError, Result};
use crate::tensor::Tensor;

use super::{Message, MsgType};

/// One completed site of a trace.
#[derive(Debug, Clone)]
pub struct Site {
    pub name: String,
    pub msg_type: MsgType,
    pub value: Tensor,
    pub dist: Option<Distribution>,
    pub is_observed: bool,
    /// Elementwise `scale * log_prob(dist, value)`; sample sites only.
    pub log_prob: Option<Tensor>,
    pub scale: f64,
    /// Value came from `rsample` during default resolution.
    pub reparameterized: bool,
}

impl Site {
    pub fn is_sample(&self) -> bool {
        self.msg_type == MsgType::Sample
    }

    pub fn is_latent(&self) -> bool {
        self.is_sample() && !self.is_observed
    }

    pub(crate) fn from_message(msg: &Message) -> Result<Self> {
        let value = msg.value.clone().expect("value resolved before postprocess");
        let log_prob = match (&msg.msg_type, &msg.dist) {
            (MsgType::Sample, Some(dist)) => {
                let lp = dist.log_prob(&value).map_err(|source| PplError::Site {
                    site: msg.name.clone(),
                    source,
                })?;
                Some(if msg.scale == 1.0 { lp } else { lp.mul_scalar(msg.scale) })
            }
            _ => None,
        };
        Ok(Self {
            name: msg.name.clone(),
            msg_type: msg.msg_type,
            value,
            dist: msg.dist.clone(),
            is_observed: msg.is_observed,
            log_prob,
            scale: msg.scale,
            reparameterized: msg.reparameterized,
        })
    }
}

/// Insertion-ordered record of one program execution.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    sites: IndexMap<String, Site>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Site> {
        self.sites.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.sites.contains_key(name)
    }

    pub fn sites(&self) -> impl Iterator<Item = &Site> {
        self.sites.values()
    }

    pub fn names(&self) -> Vec<&str> {
        self.sites.keys().map(String::as_str).collect()
    }

    pub fn sample_sites(&self) -> impl Iterator<Item = &Site> {
        self.sites().filter(|s| s.is_sample())
    }

    pub fn latent_sites(&self) -> impl Iterator<Item = &Site> {
        self.sites().filter(|s| s.is_latent())
    }

    pub fn param_sites(&self) -> impl Iterator<Item = &Site> {
        self.sites().filter(|s| s.msg_type == MsgType::Param)
    }

    /// Records a completed message. Repeated access to the same param is
    /// folded into its first record; any other repeated name is an error.
    pub fn record(&mut self, site: Site) -> Result<()> {
        if let Some(existing) = self.sites.get(&site.name) {
            if existing.msg_type == MsgType::Param && site.msg_type == MsgType::Param {
                return Ok(());
            }
            return Err(PplError::DuplicateSite { name: site.name });
        }
        self.sites.insert(site.name.clone(), site);
        Ok(())
    }

    /// Sum of the scale-weighted log densities over sample sites.
    pub fn log_prob_sum(&self) -> Result<Tensor> {
        let mut total: Option<Tensor> = None;
        for site in self.sample_sites() {
            let lp = site
                .log_prob
                .as_ref()
                .ok_or_else(|| PplError::MissingLogProb {
                    name: site.name.clone(),
                })?
                .sum();
            total = Some(match total {
                None => lp,
                Some(t) => t.add(&lp)?,
            });
        }
        Ok(total.unwrap_or_else(|| Tensor::scalar(0.0)))
    }

    /// First sample site whose log_prob contains a non-finite entry.
    pub fn first_non_finite_site(&self) -> Option<&str> {
        self.sample_sites()
            .find(|s| s.log_prob.as_ref().is_some_and(|lp| !lp.all_finite()))
            .map(|s| s.name.as_str())
    }
}
