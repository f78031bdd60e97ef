use super::scenario::{Action, ClassicalLink, Scenario, WorkloadItem};
use crate::controlplane::{IfaceRef, PhysicalLinkRequest};
use crate::lkms::AppEndpoint;
use crate::model::{Capability, InterfaceRole, NodeDescriptor, QkdInterface, Technology};
use crate::FiberSpec;

/// Device shared by the two Almagro transmitter interfaces.
pub const ALMAGRO_TX_DEVICE: &str = "almagro-cvqkd-tx";

pub const VIRTUAL_LINK_ID: &str = "vl-norte-concepcion";

/// Three-node metro ring: one CV-QKD transmitter at Almagro time-shared
/// between receivers at Norte and Concepcion, which are joined only by a
/// classical fiber.
pub fn madrid_scenario() -> Scenario {
    let tx = |iface: &str| {
        QkdInterface::new(iface, InterfaceRole::Transmitter, Technology::CV).with_device(ALMAGRO_TX_DEVICE)
    };
    let rx = || QkdInterface::new("rx-almagro", InterfaceRole::Receiver, Technology::CV);
    let nodes = vec![
        NodeDescriptor::new("almagro", "Madrid, Almagro")
            .with_interface(tx("tx-norte"))
            .with_interface(tx("tx-concepcion"))
            .with_capability(Capability::SupportsRelay)
            .with_capability(Capability::SharedTransmitter),
        NodeDescriptor::new("norte", "Madrid, Norte")
            .with_interface(rx())
            .with_capability(Capability::SupportsRelay)
            .with_capability(Capability::SupportsHybrid),
        NodeDescriptor::new("concepcion", "Madrid, Concepcion")
            .with_interface(rx())
            .with_capability(Capability::SupportsRelay)
            .with_capability(Capability::SupportsHybrid),
    ];

    let links = vec![
        // 3.9 km at 0.2 dB/km plus 5.22 dB of passives: 6 dB
        PhysicalLinkRequest {
            link_id: Some("almagro-norte".into()),
            a: IfaceRef::new("almagro", "tx-norte"),
            b: IfaceRef::new("norte", "rx-almagro"),
            fiber: FiberSpec::new(3.9, vec![5.22]),
            n_classical: 17,
            pilot_after_channel: Some(11),
            rate_profile: None,
        },
        // 6.4 km plus 5.72 dB and a 4 dB element: 11 dB
        PhysicalLinkRequest {
            link_id: Some("almagro-concepcion".into()),
            a: IfaceRef::new("almagro", "tx-concepcion"),
            b: IfaceRef::new("concepcion", "rx-almagro"),
            fiber: FiberSpec::new(6.4, vec![5.72, 4.0]),
            n_classical: 17,
            pilot_after_channel: None,
            rate_profile: None,
        },
    ];

    let at = |at_s: f64, action: Action| WorkloadItem { at_s, action };
    let workload = vec![
        at(
            0.5,
            Action::ConnectApp {
                node: "norte".into(),
                app: "enc-norte".into(),
                peer: Some("enc-concepcion".into()),
            },
        ),
        at(
            0.5,
            Action::ConnectApp {
                node: "concepcion".into(),
                app: "enc-concepcion".into(),
                peer: Some("enc-norte".into()),
            },
        ),
        at(
            1.0,
            Action::CreateVirtualLink {
                link_id: Some(VIRTUAL_LINK_ID.into()),
                a: "norte".into(),
                b: "concepcion".into(),
                min_available_bits: 0,
            },
        ),
        at(
            2.0,
            Action::RelayKey {
                link_id: VIRTUAL_LINK_ID.into(),
                bits: 256,
            },
        ),
        at(
            3.0,
            Action::OpenSession {
                label: "encryptors".into(),
                initiator: AppEndpoint::new("enc-norte", "norte"),
                responder: AppEndpoint::new("enc-concepcion", "concepcion"),
                key_size_bits: 256,
            },
        ),
        at(
            3.0,
            Action::GetKey {
                session: "encryptors".into(),
                count: 1,
                size_bits: 256,
                fetch_at_peer: true,
            },
        ),
    ];

    Scenario {
        nodes,
        links,
        classical_links: vec![ClassicalLink {
            a: "norte".into(),
            b: "concepcion".into(),
            // 5.5 km plus passives: 7 dB
            fiber: FiberSpec::new(5.5, vec![5.9]),
        }],
        workload,
        ..Scenario::default()
    }
}
