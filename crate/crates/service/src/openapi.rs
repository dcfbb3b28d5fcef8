//! OpenAPI description served at `/v1/spec`.

use serde_json::{json, Value};
use timbre_core::config::ServiceConfig;
use timbre_core::pipeline::Models;

fn edit_form(extra: Value, required: &[&str]) -> Value {
    let mut props = json!({
        "audio": { "type": "string", "format": "binary", "description": "Mono WAV at the model sample rate" },
        "prompt": { "type": "string" },
        "guidance_w": { "type": "number", "minimum": 0 },
        "seed": { "type": "integer", "minimum": 0 },
        "steps": { "type": "integer", "minimum": 1 },
    });
    if let (Some(p), Some(e)) = (props.as_object_mut(), extra.as_object()) {
        p.extend(e.clone());
    }
    let mut req = vec!["audio"];
    req.extend_from_slice(required);
    json!({
        "required": true,
        "content": { "multipart/form-data": { "schema": { "type": "object", "properties": props, "required": req } } }
    })
}

fn job_responses() -> Value {
    json!({
        "200": { "description": "Job result", "content": { "application/json": { "schema": { "$ref": "#/components/schemas/JobResult" } } } },
        "400": { "description": "Invalid parameters", "content": { "application/json": { "schema": { "$ref": "#/components/schemas/Error" } } } },
        "415": { "description": "Audio is not a mono WAV at the model sample rate" },
        "503": { "description": "Models not loaded" }
    })
}

pub fn document(service: &ServiceConfig, models: Option<&Models>) -> Value {
    let max_steps = models.map_or(service.max_steps, |m| service.max_steps.min(m.timesteps()));
    let t = models.map(|m| m.timesteps());
    json!({
        "openapi": "3.0.3",
        "info": { "title": "timbre", "version": env!("CARGO_PKG_VERSION") },
        "paths": {
            "/v1/health": { "get": { "summary": "Readiness and checkpoint hashes", "responses": {
                "200": { "description": "Ready" }, "503": { "description": "Loading or failed" } } } },
            "/v1/config": { "get": { "summary": "Effective configuration and request limits", "responses": {
                "200": { "description": "Configuration" }, "503": { "description": "Models not loaded" } } } },
            "/v1/spec": { "get": { "summary": "This document", "responses": { "200": { "description": "OpenAPI JSON" } } } },
            "/v1/generate": { "post": {
                "summary": "Sample a note from a text prompt",
                "requestBody": { "required": true, "content": { "application/json": { "schema": { "$ref": "#/components/schemas/GenerateRequest" } } } },
                "responses": job_responses()
            } },
            "/v1/transform": { "post": {
                "summary": "Re-noise the input to step t0 and denoise under the prompt",
                "requestBody": edit_form(json!({ "t0": { "type": "integer", "minimum": 0, "maximum": t } }), &["t0"]),
                "responses": job_responses()
            } },
            "/v1/inpaint": { "post": {
                "summary": "Regenerate the black region of a spectrogram mask",
                "requestBody": edit_form(json!({ "mask": { "type": "string", "format": "binary", "description": "Grayscale PNG at spectrogram size; white = keep" } }), &["mask"]),
                "responses": job_responses()
            } },
            "/v1/extend": { "post": {
                "summary": "Change a note's length, regenerating sustain",
                "requestBody": edit_form(json!({ "target_frames": { "type": "integer", "minimum": 1 } }), &["target_frames"]),
                "responses": job_responses()
            } },
            "/v1/files/{id}": { "get": {
                "summary": "Temporary WAV download for results over the inline limit",
                "parameters": [{ "name": "id", "in": "path", "required": true, "schema": { "type": "string" } }],
                "responses": { "200": { "description": "WAV", "content": { "audio/wav": {} } }, "404": { "description": "Unknown or expired" } }
            } }
        },
        "components": { "schemas": {
            "GenerateRequest": {
                "type": "object",
                "additionalProperties": false,
                "required": ["prompt", "guidance_w"],
                "properties": {
                    "prompt": { "type": "string", "maxLength": timbre_core::data::MAX_DESCRIPTION_CHARS },
                    "guidance_w": { "type": "number", "minimum": 0 },
                    "seed": { "type": "integer", "minimum": 0 },
                    "steps": { "type": "integer", "minimum": 1, "maximum": max_steps }
                }
            },
            "JobResult": {
                "type": "object",
                "required": ["id", "spectrogram_png_base64", "params", "sidecar", "timing"],
                "properties": {
                    "id": { "type": "string" },
                    "audio_base64": { "type": "string", "nullable": true },
                    "audio_url": { "type": "string", "nullable": true },
                    "spectrogram_png_base64": { "type": "string" },
                    "sample_rate": { "type": "integer" },
                    "samples": { "type": "integer" },
                    "params": { "type": "object" },
                    "sidecar": { "type": "object" },
                    "timing": { "type": "object", "properties": { "queued_ms": { "type": "number" }, "compute_ms": { "type": "number" } } }
                }
            },
            "Error": { "type": "object", "properties": { "error": { "type": "string" } } }
        } }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unloaded_document_uses_service_bounds() {
        let doc = document(&ServiceConfig::default(), None);
        assert_eq!(doc["openapi"], "3.0.3");
        let steps = &doc["components"]["schemas"]["GenerateRequest"]["properties"]["steps"];
        assert_eq!(steps["maximum"], ServiceConfig::default().max_steps);
        let form = &doc["paths"]["/v1/inpaint"]["post"]["requestBody"]["content"]["multipart/form-data"]["schema"];
        assert_eq!(form["required"], json!(["audio", "mask"]));
    }
}
