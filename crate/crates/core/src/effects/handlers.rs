use std::cell::RefCell;
use std::rc::Rc;

use indexmap::IndexMap;

use crate::error::{MatchReport, PplError, Result};
use crate::tensor::{broadcast_shapes, Tensor};

use super::{Context, Handler, Message, MsgType, Site, Trace};

/// A program's return value together with the trace of the run.
#[derive(Debug, Clone)]
pub struct Traced<T> {
    pub trace: Trace,
    pub value: T,
}

/// Records every message that reaches it.
pub struct TraceHandler {
    trace: Rc<RefCell<Trace>>,
}

impl TraceHandler {
    pub fn new(trace: Rc<RefCell<Trace>>) -> Self {
        Self { trace }
    }
}

impl Handler for TraceHandler {
    fn postprocess(&mut self, msg: &mut Message) -> Result<()> {
        let site = Site::from_message(msg)?;
        msg.log_prob = site.log_prob.clone();
        self.trace.borrow_mut().record(site)
    }
}

/// Runs `program` under a fresh trace handler.
pub fn trace_run<A, T, P>(ctx: &mut Context, program: &P, args: &A) -> Result<Traced<T>>
where
    A: ?Sized,
    P: Fn(&mut Context, &A) -> Result<T> + ?Sized,
{
    let trace = Rc::new(RefCell::new(Trace::new()));
    let value = ctx.with_handler(TraceHandler::new(trace.clone()), |ctx| program(ctx, args))?;
    let trace = Rc::try_unwrap(trace)
        .map(RefCell::into_inner)
        .unwrap_or_else(|rc| rc.borrow().clone());
    Ok(Traced { trace, value })
}

/// Forces unobserved sample sites to the values recorded in a trace.
pub struct ReplayHandler {
    trace: Rc<Trace>,
}

impl ReplayHandler {
    pub fn new(trace: Rc<Trace>) -> Self {
        Self { trace }
    }
}

impl Handler for ReplayHandler {
    fn process(&mut self, msg: &mut Message) -> Result<()> {
        if msg.msg_type != MsgType::Sample || msg.is_observed {
            return Ok(());
        }
        if let Some(site) = self.trace.get(&msg.name).filter(|s| s.is_sample()) {
            let batch = msg.dist.as_ref().map_or(&[][..], |d| d.batch_shape());
            if broadcast_shapes(batch, site.value.shape()).is_none() {
                return Err(PplError::ModelGuideMismatch(MatchReport {
                    shape_mismatch: vec![(msg.name.clone(), batch.to_vec(), site.value.shape().to_vec())],
                    ..Default::default()
                }));
            }
            msg.value = Some(site.value.clone());
            msg.done = true;
        }
        Ok(())
    }
}

pub fn replay<A, T, P>(program: P, trace: impl Into<Rc<Trace>>) -> impl Fn(&mut Context, &A) -> Result<T>
where
    A: ?Sized,
    P: Fn(&mut Context, &A) -> Result<T>,
{
    let trace = trace.into();
    move |ctx: &mut Context, args: &A| {
        ctx.with_handler(ReplayHandler::new(trace.clone()), |ctx| program(ctx, args))
    }
}

/// Turns named sample sites into observations of fixed values.
pub struct ConditionHandler {
    data: Rc<IndexMap<String, Tensor>>,
}

impl ConditionHandler {
    pub fn new(data: Rc<IndexMap<String, Tensor>>) -> Self {
        Self { data }
    }
}

impl Handler for ConditionHandler {
    fn process(&mut self, msg: &mut Message) -> Result<()> {
        let Some(value) = self.data.get(&msg.name) else {
            return Ok(());
        };
        if msg.msg_type == MsgType::Param {
            return Err(PplError::ConditionedParam {
                name: msg.name.clone(),
            });
        }
        msg.value = Some(value.clone());
        msg.is_observed = true;
        msg.done = true;
        Ok(())
    }
}

pub fn condition<A, T, P>(program: P, data: IndexMap<String, Tensor>) -> impl Fn(&mut Context, &A) -> Result<T>
where
    A: ?Sized,
    P: Fn(&mut Context, &A) -> Result<T>,
{
    let data = Rc::new(data);
    move |ctx: &mut Context, args: &A| {
        ctx.with_handler(ConditionHandler::new(data.clone()), |ctx| program(ctx, args))
    }
}

/// Hides matching sites from every handler installed outside it.
pub struct BlockHandler {
    hide: Rc<dyn Fn(&str) -> bool>,
}

impl BlockHandler {
    pub fn new(hide: Rc<dyn Fn(&str) -> bool>) -> Self {
        Self { hide }
    }
}

impl Handler for BlockHandler {
    fn process(&mut self, msg: &mut Message) -> Result<()> {
        if (self.hide)(&msg.name) {
            msg.stop = true;
        }
        Ok(())
    }
}

pub fn block<A, T, P>(program: P, hide: impl Fn(&str) -> bool + 'static) -> impl Fn(&mut Context, &A) -> Result<T>
where
    A: ?Sized,
    P: Fn(&mut Context, &A) -> Result<T>,
{
    let hide: Rc<dyn Fn(&str) -> bool> = Rc::new(hide);
    move |ctx: &mut Context, args: &A| {
        ctx.with_handler(BlockHandler::new(hide.clone()), |ctx| program(ctx, args))
    }
}

/// Multiplies the log-density weight of every enclosed sample site.
pub struct ScaleHandler {
    factor: f64,
}

impl ScaleHandler {
    pub fn new(factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(PplError::InvalidScale { factor });
        }
        Ok(Self { factor })
    }
}

impl Handler for ScaleHandler {
    fn process(&mut self, msg: &mut Message) -> Result<()> {
        if msg.msg_type == MsgType::Sample {
            msg.scale *= self.factor;
        }
        Ok(())
    }
}

pub fn scale<A, T, P>(program: P, factor: f64) -> Result<impl Fn(&mut Context, &A) -> Result<T>>
where
    A: ?Sized,
    P: Fn(&mut Context, &A) -> Result<T>,
{
    ScaleHandler::new(factor)?;
    Ok(move |ctx: &mut Context, args: &A| {
        let handler = ScaleHandler { factor };
        ctx.with_handler(handler, |ctx| program(ctx, args))
    })
}
