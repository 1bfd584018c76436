//! Deployable stream processors that talk to each other only through the bus.

use std::future::Future;
use std::pin::Pin;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use tokio::task::JoinHandle;
use tokio_util::sync::CancellationToken;

use super::bus::{close_shared, EventBus, Publisher, SubShared, Subscription, SubscriptionPolicy};

pub type VerticleFuture = Pin<Box<dyn Future<Output = ()> + Send>>;

pub trait Verticle: Send + 'static {
    fn name(&self) -> &str;
    fn start(self: Box<Self>, ctx: VerticleContext) -> VerticleFuture;
}

/// What a running verticle sees of the server.
#[derive(Clone)]
pub struct VerticleContext {
    bus: EventBus,
    name: String,
    cancel: CancellationToken,
    subs: Arc<Mutex<Vec<Arc<SubShared>>>>,
}

impl VerticleContext {
    pub fn bus(&self) -> &EventBus {
        &self.bus
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn cancelled(&self) -> &CancellationToken {
        &self.cancel
    }

    pub fn publisher(&self) -> Publisher {
        self.bus.publisher(self.name.clone())
    }

    /// Opens a subscription that is closed when the verticle is undeployed.
    pub fn subscribe(&self, policy: SubscriptionPolicy) -> Subscription {
        let sub = self.bus.subscribe(self.name.clone(), policy);
        self.subs.lock().push(sub.shared());
        sub
    }
}

pub struct Deployment {
    name: String,
    cancel: CancellationToken,
    subs: Arc<Mutex<Vec<Arc<SubShared>>>>,
    bus: EventBus,
    task: JoinHandle<()>,
}

impl Deployment {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn is_finished(&self) -> bool {
        self.task.is_finished()
    }

    /// Stops the verticle and closes its subscriptions. Others are untouched.
    pub async fn undeploy(self) {
        self.undeploy_within(Duration::from_secs(5)).await
    }

    pub async fn undeploy_within(self, grace: Duration) {
        self.cancel.cancel();
        for shared in self.subs.lock().drain(..) {
            close_shared(&self.bus, &shared);
        }
        let mut task = self.task;
        if tokio::time::timeout(grace, &mut task).await.is_err() {
            tracing::warn!(verticle = %self.name, "did not stop in time, aborting");
            task.abort();
        }
    }
}

impl EventBus {
    pub fn deploy<V: Verticle>(&self, verticle: V) -> Deployment {
        self.deploy_boxed(Box::new(verticle))
    }

    pub fn deploy_boxed(&self, verticle: Box<dyn Verticle>) -> Deployment {
        let name = verticle.name().to_owned();
        let ctx = VerticleContext {
            bus: self.clone(),
            name: name.clone(),
            cancel: CancellationToken::new(),
            subs: Arc::new(Mutex::new(Vec::new())),
        };
        let cancel = ctx.cancel.clone();
        let subs = Arc::clone(&ctx.subs);
        let task = tokio::spawn(verticle.start(ctx));
        tracing::debug!(verticle = %name, "deployed");
        Deployment {
            name,
            cancel,
            subs,
            bus: self.clone(),
            task,
        }
    }
}

/// Verticle from a closure; handy for small consumers and tests.
pub struct FnVerticle<F> {
    name: String,
    body: F,
}

impl<F, Fut> FnVerticle<F>
where
    F: FnOnce(VerticleContext) -> Fut + Send + 'static,
    Fut: Future<Output = ()> + Send + 'static,
{
    pub fn new(name: impl Into<String>, body: F) -> Self {
        Self {
            name: name.into(),
            body,
        }
    }
}

impl<F, Fut> Verticle for FnVerticle<F>
where
    F: FnOnce(VerticleContext) -> Fut + Send + 'static,
    Fut: Future<Output = ()> + Send + 'static,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn start(self: Box<Self>, ctx: VerticleContext) -> VerticleFuture {
        Box::pin((self.body)(ctx))
    }
}
