//! Effect-handler runtime: the `sample`/`param` primitives, a dynamically
//! scoped handler stack, traces, and the standard handlers.
//!
//! A program is any `Fn(&mut Context, &A) -> Result<T>`. Each primitive builds a
//! [`Message`] and dispatches it through the stack:
//!
//! 1. `process` hooks run innermost → outermost; a handler that sets `stop`
//!    hides the message from everything further out.
//! 2. If no handler supplied a value, the default draws one (`rsample` when
//!    the distribution supports it, otherwise `sample`), or for params reads
//!    the [`ParamStore`].
//! 3. `postprocess` hooks run over the visited handlers in reverse visitation
//!    order, i.e. outermost visited first.

mod handlers;
mod params;
mod trace;

pub use handlers::{
    block, condition, replay, scale, trace_run, BlockHandler, ConditionHandler, ReplayHandler,
    ScaleHandler, TraceHandler, Traced,
};
pub use params::{Constraint, ParamEntry, ParamInit, ParamStore};
pub use trace::{Site, Trace};

use indexmap::IndexMap;

use crate::distributions::Distribution;
use crate::error::{PplError, Result};
use crate::random::RandomStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MsgType {
    Sample,
    Param,
}

/// The record passed through the handler stack for one primitive call.
#[derive(Debug, Clone)]
pub struct Message {
    pub msg_type: MsgType,
    pub name: String,
    pub dist: Option<Distribution>,
    pub value: Option<Tensor>,
    pub is_observed: bool,
    pub log_prob: Option<Tensor>,
    pub scale: f64,
    pub stop: bool,
    pub done: bool,
    pub reparameterized: bool,
    pub constraint: Option<Constraint>,
}

impl Message {
    fn sample(name: &str, dist: Distribution, obs: Option<Tensor>) -> Self {
        Self {
            msg_type: MsgType::Sample,
            name: name.to_string(),
            dist: Some(dist),
            is_observed: obs.is_some(),
            done: obs.is_some(),
            value: obs,
            log_prob: None,
            scale: 1.0,
            stop: false,
            reparameterized: false,
            constraint: None,
        }
    }

    fn param(name: &str, constraint: Constraint) -> Self {
        Self {
            msg_type: MsgType::Param,
            name: name.to_string(),
            dist: None,
            value: None,
            is_observed: false,
            log_prob: None,
            scale: 1.0,
            stop: false,
            done: false,
            reparameterized: false,
            constraint: Some(constraint),
        }
    }
}

/// An effect handler. Both hooks default to pass-through.
pub trait Handler {
    fn process(&mut self, _msg: &mut Message) -> Result<()> {
        Ok(())
    }

    fn postprocess(&mut self, _msg: &mut Message) -> Result<()> {
        Ok(())
    }
}

/// Execution context: random stream, param store and handler stack. Confined
/// to one thread; independent contexts may run in parallel.
pub struct Context {
    pub rng: RandomStream,
    params: ParamStore,
    stack: Vec<Box<dyn Handler>>,
}

impl Context {
    pub fn new(seed: u64) -> Self {
        Self::with_params(seed, ParamStore::new())
    }

    pub fn with_params(seed: u64, params: ParamStore) -> Self {
        Self {
            rng: RandomStream::new(seed),
            params,
            stack: Vec::new(),
        }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn stack_depth(&self) -> usize {
        self.stack.len()
    }

    /// Runs `body` with `handler` installed as the innermost handler. The
    /// stack is restored to its previous depth whether or not `body` fails.
    pub fn with_handler<T>(
        &mut self,
        handler: impl Handler + 'static,
        body: impl FnOnce(&mut Context) -> Result<T>,
    ) -> Result<T> {
        let depth = self.stack.len();
        self.stack.push(Box::new(handler));
        let out = body(self);
        self.stack.truncate(depth);
        out
    }

    /// Dispatches `msg` through `process` hooks; returns how many handlers saw it.
    fn run_process(&mut self, msg: &mut Message) -> Result<usize> {
        let mut visited = 0;
        for handler in self.stack.iter_mut().rev() {
            visited += 1;
            handler.process(msg)?;
            if msg.stop {
                break;
            }
        }
        Ok(visited)
    }

    fn run_postprocess(&mut self, msg: &mut Message, visited: usize) -> Result<()> {
        let n = self.stack.len();
        for handler in &mut self.stack[n - visited..] {
            handler.postprocess(msg)?;
        }
        Ok(())
    }

    /// The `sample` primitive. With `obs` the site is observed and returns
    /// `obs`; otherwise the handlers or the default draw decide the value.
    pub fn sample(&mut self, name: &str, dist: &Distribution, obs: Option<&Tensor>) -> Result<Tensor> {
        if name.is_empty() {
            return Err(PplError::EmptySiteName);
        }
        let mut msg = Message::sample(name, dist.clone(), obs.cloned());
        let visited = self.run_process(&mut msg)?;
        match &msg.value {
            Some(v) => {
                let d = msg.dist.as_ref().expect("sample message");
                d.check_support(v).map_err(|source| PplError::Site {
                    site: name.to_string(),
                    source,
                })?;
            }
            None => {
                let d = msg.dist.as_ref().expect("sample message");
                let value = if d.has_rsample() {
                    msg.reparameterized = true;
                    d.rsample(&mut self.rng)?
                } else {
                    d.sample(&mut self.rng)
                };
                msg.value = Some(value);
            }
        }
        self.run_postprocess(&mut msg, visited)?;
        Ok(msg.value.expect("resolved"))
    }

    /// Shorthand for an unobserved `sample`.
    pub fn draw(&mut self, name: &str, dist: &Distribution) -> Result<Tensor> {
        self.sample(name, dist, None)
    }

    pub fn observe(&mut self, name: &str, dist: &Distribution, obs: &Tensor) -> Result<Tensor> {
        self.sample(name, dist, Some(obs))
    }

    /// The `param` primitive: returns the constrained, graph-connected value
    /// of the named parameter, creating it from `init` on first use.
    pub fn param(&mut self, name: &str, init: impl Into<ParamInit>, constraint: Constraint) -> Result<Tensor> {
        if name.is_empty() {
            return Err(PplError::EmptySiteName);
        }
        let mut msg = Message::param(name, constraint);
        let visited = self.run_process(&mut msg)?;
        let value = self
            .params
            .get_or_create(name, init.into(), constraint, &mut self.rng)?;
        msg.value = Some(value);
        msg.done = true;
        self.run_postprocess(&mut msg, visited)?;
        Ok(msg.value.expect("resolved"))
    }

    /// Registers every member as `param("{prefix}.{local}")` and returns the
    /// constrained tensors keyed by local name.
    pub fn register_module<I, S>(&mut self, prefix: &str, members: I) -> Result<IndexMap<String, Tensor>>
    where
        I: IntoIterator<Item = (S, ParamInit)>,
        S: Into<String>,
    {
        let mut out = IndexMap::new();
        for (local, init) in members {
            let local = local.into();
            let value = self.param(&format!("{prefix}.{local}"), init, Constraint::Real)?;
            out.insert(local, value);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_stack_forward_draw() {
        let mut ctx = Context::new(0);
        let d = Distribution::bernoulli(1.0).unwrap();
        assert_eq!(ctx.draw("b", &d).unwrap().item(), 1.0);
    }

    #[test]
    fn obs_passthrough() {
        let mut ctx = Context::new(0);
        let d = Distribution::normal(0.0, 1.0).unwrap();
        let x = Tensor::from_slice(&[0.25, -3.0]);
        let out = ctx.observe("x", &d, &x).unwrap();
        assert!(out.same_storage(&x));
    }

    #[test]
    fn obs_outside_support_names_site() {
        let mut ctx = Context::new(0);
        let d = Distribution::bernoulli(0.5).unwrap();
        let err = ctx.observe("coin", &d, &Tensor::scalar(2.0)).unwrap_err();
        assert!(matches!(err, PplError::Site { ref site, .. } if site == "coin"));
        assert!(err.to_string().contains("coin"));
    }

    #[test]
    fn empty_names_rejected() {
        let mut ctx = Context::new(0);
        let d = Distribution::normal(0.0, 1.0).unwrap();
        assert_eq!(ctx.draw("", &d).unwrap_err(), PplError::EmptySiteName);
        assert_eq!(ctx.param("", 1.0, Constraint::Real).unwrap_err(), PplError::EmptySiteName);
    }

    #[test]
    fn param_shares_storage_across_calls() {
        let mut ctx = Context::new(0);
        let w = ctx.param("w", Tensor::zeros(&[2, 2]), Constraint::Real).unwrap();
        let w2 = ctx.param("w", Tensor::ones(&[2, 2]), Constraint::Real).unwrap();
        assert!(w.same_storage(&w2));
        // an optimizer-style update is visible to the next access
        w.set_data(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        let w3 = ctx.param("w", Tensor::zeros(&[2, 2]), Constraint::Real).unwrap();
        assert_eq!(w3.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn register_module_naming() {
        let mut ctx = Context::new(0);
        let none: Vec<(String, ParamInit)> = Vec::new();
        assert!(ctx.register_module("empty", none).unwrap().is_empty());
        assert!(ctx.params().is_empty());
        let members = ["W1", "b1", "W2", "b2"].map(|n| (n, ParamInit::from(Tensor::zeros(&[2]))));
        let out = ctx.register_module("encoder", members).unwrap();
        assert_eq!(out.len(), 4);
        let names: Vec<&str> = ctx.params().iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["encoder.W1", "encoder.b1", "encoder.W2", "encoder.b2"]);
        // re-registration keeps updated values
        ctx.params().get("encoder.W1").unwrap().unconstrained().set_data(&[5.0, 6.0]).unwrap();
        let members = ["W1"].map(|n| (n, ParamInit::from(Tensor::zeros(&[2]))));
        let again = ctx.register_module("encoder", members).unwrap();
        assert_eq!(again["W1"].to_vec(), vec![5.0, 6.0]);
    }

    struct Counting(std::rc::Rc<std::cell::RefCell<Vec<String>>>, &'static str);

    impl Handler for Counting {
        fn process(&mut self, _msg: &mut Message) -> Result<()> {
            self.0.borrow_mut().push(format!("process:{}", self.1));
            Ok(())
        }
        fn postprocess(&mut self, _msg: &mut Message) -> Result<()> {
            self.0.borrow_mut().push(format!("post:{}", self.1));
            Ok(())
        }
    }

    #[test]
    fn dispatch_order() {
        let log = std::rc::Rc::new(std::cell::RefCell::new(Vec::new()));
        let mut ctx = Context::new(0);
        let d = Distribution::normal(0.0, 1.0).unwrap();
        let (l1, l2) = (log.clone(), log.clone());
        ctx.with_handler(Counting(l1, "outer"), |ctx| {
            ctx.with_handler(Counting(l2, "inner"), |ctx| ctx.draw("z", &d))
        })
        .unwrap();
        assert_eq!(
            *log.borrow(),
            ["process:inner", "process:outer", "post:outer", "post:inner"]
        );
        assert_eq!(ctx.stack_depth(), 0);
    }
}
