//! The server interface shared by the simulator and the socket transport.

use std::any::Any;

use crate::crypto::ServerId;
use crate::message::Message;

/// Effects produced while handling one event.
#[derive(Debug, Default)]
pub struct Outbox {
    pub sends: Vec<(ServerId, Message)>,
    /// `(delay_us, token)` pairs; the token comes back through
    /// [`Service::timer`].
    pub timers: Vec<(u64, u64)>,
}

impl Outbox {
    pub fn send(&mut self, to: ServerId, msg: Message) {
        self.sends.push((to, msg));
    }

    pub fn set_timer(&mut self, delay_us: u64, token: u64) {
        self.timers.push((delay_us, token));
    }
}

pub trait Service: Any {
    fn handle(&mut self, now_us: u64, from: ServerId, msg: Message, out: &mut Outbox);

    fn timer(&mut self, _now_us: u64, _token: u64, _out: &mut Outbox) {}
}

impl dyn Service {
    pub fn downcast_ref<T: Service>(&self) -> Option<&T> {
        (self as &dyn Any).downcast_ref()
    }

    pub fn downcast_mut<T: Service>(&mut self) -> Option<&mut T> {
        (self as &mut dyn Any).downcast_mut()
    }
}
