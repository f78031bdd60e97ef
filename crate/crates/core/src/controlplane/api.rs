//! Northbound API: request routing over documents.
//!
//! Transport-agnostic. The CLI binds it to a local HTTP endpoint; tests call
//! [`route`] directly.

use serde::Serialize;
use serde_json::{json, Value};

use super::{AppInventory, Controller, ControllerState, PhysicalLinkRequest, VirtualLinkRequest};
use crate::document::{from_document, to_document};
use crate::model::{Link, NodeDescriptor};
use crate::Error;

/// Anything that can serve the northbound endpoints.
pub trait NorthboundHost {
    fn register_node(&mut self, descriptor: NodeDescriptor) -> Result<(), Error>;
    fn create_physical_link(&mut self, req: PhysicalLinkRequest) -> Result<Link, Error>;
    fn create_virtual_link(&mut self, req: VirtualLinkRequest) -> Result<Link, Error>;
    fn controller_state(&self) -> ControllerState;
    fn applications(&self) -> Vec<AppInventory>;
    fn metrics(&self) -> Value;
}

impl NorthboundHost for Controller {
    fn register_node(&mut self, descriptor: NodeDescriptor) -> Result<(), Error> {
        Ok(Controller::register_node(self, descriptor)?)
    }

    fn create_physical_link(&mut self, req: PhysicalLinkRequest) -> Result<Link, Error> {
        Ok(Controller::create_physical_link(self, req)?)
    }

    fn create_virtual_link(&mut self, req: VirtualLinkRequest) -> Result<Link, Error> {
        // Without agents attached the controller routes on reported counters.
        let state = self.state();
        let available = |link_id: &str| {
            state
                .links
                .iter()
                .find(|l| l.link.link_id == link_id)
                .and_then(|l| l.counters.values().map(|c| c.available_bits).min())
                .unwrap_or(0)
        };
        Ok(Controller::create_virtual_link(self, req, available)?)
    }

    fn controller_state(&self) -> ControllerState {
        self.state()
    }

    fn applications(&self) -> Vec<AppInventory> {
        Controller::applications(self)
    }

    fn metrics(&self) -> Value {
        self.metrics_summary()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiResponse {
    pub status: u16,
    pub body: String,
}

impl ApiResponse {
    fn ok<T: Serialize>(status: u16, value: &T) -> Self {
        Self {
            status,
            body: to_document(value),
        }
    }

    fn error(status: u16, code: &str, message: &str, path: Option<&str>) -> Self {
        let mut body = json!({ "code": code, "message": message });
        if let Some(p) = path {
            body["path"] = json!(p);
        }
        Self {
            status,
            body: to_document(&body),
        }
    }

    fn from_error(err: &Error) -> Self {
        let code = err.code();
        let status = match err {
            Error::Document(_) => 400,
            _ if code.starts_with("unknown_") => 404,
            _ if code.starts_with("duplicate_") || code == "interface_busy" => 409,
            _ => 422,
        };
        let path = match err {
            Error::Document(d) => Some(d.path.as_str()),
            _ => None,
        };
        Self::error(status, code, &err.to_string(), path)
    }
}

fn parse<T: serde::de::DeserializeOwned>(body: &str) -> Result<T, Error> {
    Ok(from_document(body)?)
}

/// Dispatches one request. `path` excludes any query string.
pub fn route<H: NorthboundHost + ?Sized>(host: &mut H, method: &str, path: &str, body: &str) -> ApiResponse {
    let path = path.trim_end_matches('/');
    let result = match (method, path) {
        ("POST", "/nodes") => parse::<NodeDescriptor>(body).and_then(|d| {
            let id = d.node_id.clone();
            host.register_node(d).map(|()| ApiResponse::ok(201, &json!({ "node_id": id })))
        }),
        ("POST", "/links/physical") => parse::<PhysicalLinkRequest>(body)
            .and_then(|r| host.create_physical_link(r))
            .map(|l| ApiResponse::ok(201, &l)),
        ("POST", "/links/virtual") => parse::<VirtualLinkRequest>(body)
            .and_then(|r| host.create_virtual_link(r))
            .map(|l| ApiResponse::ok(201, &l)),
        ("GET", "/state") => Ok(ApiResponse::ok(200, &host.controller_state())),
        ("GET", "/applications") => Ok(ApiResponse::ok(200, &host.applications())),
        ("GET", "/metrics") => Ok(ApiResponse::ok(200, &host.metrics())),
        (_, "/nodes" | "/links/physical" | "/links/virtual" | "/state" | "/applications" | "/metrics") => {
            return ApiResponse::error(405, "method_not_allowed", &format!("{method} not allowed on {path}"), None)
        }
        _ => return ApiResponse::error(404, "not_found", &format!("no endpoint {path}"), None),
    };
    result.unwrap_or_else(|e| ApiResponse::from_error(&e))
}
