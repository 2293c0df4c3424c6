"""Dapp-side actors and the five end-to-end flows.

Each flow is a plain function over a :class:`World`.  A flow that fails a
verification raises :class:`FlowAborted` before its next chain write, so an
aborted flow never leaves half-finished records behind.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

from . import crypto, vm
from .attestation import AttestationReport, AttestationService, ServiceProvider, verify_report
from .enclave import (
    Dataset,
    Enclave,
    EnclaveImage,
    IngestRejected,
    QueryRefused,
    TrainingGrant,
    ValidationReport,
    ValidatorConfig,
    Wire,
    launch,
    seal_to,
)
from .encoding import canonical_json, framed
from .ledger import Chain, ChainAccount, LogicalClock, Transaction, create_account
from .p2p import BROADCAST, UNICAST, Network, P2pAccount, make_binding
from .repository import Repository, verify_anchored

log = logging.getLogger(__name__)


class FlowAborted(Exception):
    pass


class World:
    """Shared simulation context: one chain, one repository, one overlay."""

    def __init__(self, seed: int, accounts: list[ChainAccount], miners: list[ChainAccount],
                 initial_balance: int = 1000, max_txs_per_block: int = 64, stores=None):
        self.rng = crypto.Rng(seed)
        self.clock = LogicalClock()
        self.miners = miners
        alloc = {a.public: initial_balance for a in accounts}
        self.chain = Chain([m.public for m in miners], alloc, max_txs_per_block, self.clock)
        self.repo = Repository(stores) if stores else Repository()
        self.ias = AttestationService(self.rng.split("ias"), self.clock)
        self.sp = ServiceProvider(self.ias)
        self.net = Network(self.chain.contracts, self.clock)
        self.wire = Wire()
        self.aborted: list[str] = []
        self.training_output: list[int] = []  # external bytes emitted per train() call
        self.enclaves: list[Enclave] = []

    @property
    def contracts(self):
        return self.chain.contracts

    def submit(self, tx: Transaction) -> Transaction:
        res = self.chain.submit_tx(tx)
        if not res:
            raise FlowAborted(f"transaction rejected: {res.reason}")
        return tx

    def confirm(self):
        miner = next(m for m in self.miners if m.public == self.chain.scheduled_miner())
        return self.chain.mine_block(miner)

    def transact(self, account: ChainAccount, contract: str, op: str, **args) -> tuple[str, dict]:
        """Submit one call, mine it, and return (result, contract output)."""
        tx = self.submit(account.transact(contract, op, **args))
        self.confirm()
        return self.chain.result_of(tx), self.chain.outputs.get(tx.signature, {})


# --- actors -------------------------------------------------------------------


@dataclass
class OwnerPolicy:
    whitelist: tuple[str, ...] = ()
    blacklist: tuple[str, ...] = ()
    consent: str = "Auto"  # Auto | Deny | ByTag
    max_report_age: int | None = None  # ticks; None accepts any age

    def consents(self, tags) -> bool:
        tags = set(tags)
        if tags & set(self.blacklist) or self.consent == "Deny":
            return False
        if self.consent == "ByTag":
            return bool(tags & set(self.whitelist))
        return True


@dataclass
class Actor:
    name: str
    account: ChainAccount
    rng: crypto.Rng

    @property
    def public(self) -> bytes:
        return self.account.public


@dataclass
class DataOwner(Actor):
    dataset: Dataset | None = None
    policy: OwnerPolicy = field(default_factory=OwnerPolicy)
    p2p: P2pAccount | None = None
    channel_key: crypto.KeyPair | None = None
    report: ValidationReport | None = None
    processed: bytes | None = None
    contacted: list[bytes] = field(default_factory=list)
    reattested: int = 0

    def __post_init__(self):
        self.p2p = P2pAccount(crypto.keygen(self.rng.split("p2p")))
        self.channel_key = crypto.keygen(self.rng.split("channel"))


@dataclass
class ModelTrainer(Actor):
    p2p: P2pAccount | None = None
    channel_key: crypto.KeyPair | None = None
    eval_dataset: Dataset | None = None

    def __post_init__(self):
        self.p2p = P2pAccount(crypto.keygen(self.rng.split("p2p")))
        self.channel_key = crypto.keygen(self.rng.split("channel"))


@dataclass
class EnclaveRunner(Actor):
    cpu: object = None
    enclaves: dict = field(default_factory=dict)  # kind -> Enclave

    def host_submit(self, world: World):
        def submit(contract, op, args):
            world.submit(self.account.transact(contract, op, **args))

        return submit


@dataclass
class EndUser(DataOwner):
    pass


@dataclass
class RecruitingCall:
    model_id: bytes
    required_traits: tuple[str, ...]
    required_panel: tuple[str, ...]
    reward_terms: str
    whitepaper_hash: bytes
    tags: tuple[str, ...] = ()
    label: str = ""

    def encode(self) -> bytes:
        return canonical_json(
            {
                "model_id": self.model_id.hex(),
                "required_traits": list(self.required_traits),
                "required_panel": list(self.required_panel),
                "reward_terms": self.reward_terms,
                "whitepaper_hash": self.whitepaper_hash.hex(),
                "tags": list(self.tags),
                "label": self.label,
            }
        )

    @classmethod
    def decode(cls, data: bytes) -> "RecruitingCall":
        import json

        d = json.loads(data)
        return cls(
            bytes.fromhex(d["model_id"]), tuple(d["required_traits"]), tuple(d["required_panel"]),
            d["reward_terms"], bytes.fromhex(d["whitepaper_hash"]), tuple(d["tags"]), d["label"],
        )


# --- shared verification ------------------------------------------------------


def verify_enclave(world: World, pubkey: bytes, kind: str, *, max_age: int | None = None,
                   runner: EnclaveRunner | None = None, nonce_rng: crypto.Rng | None = None) -> bool:
    """Owner-side check of an enclave before sending it anything.

    Chain instance of the right kind, audited package whose audit reports
    resolve in the repository, and an OK attestation report bound to this key.
    A report older than ``max_age`` ticks triggers a fresh attestation with a
    new nonce.  Returns True if re-attestation happened.
    """
    c = world.contracts
    inst = c.instance(pubkey)
    if inst is None or inst["kind"] != kind:
        raise FlowAborted(f"enclave is not a registered {kind} instance")
    pkg = c.package(inst["measurement"])
    if pkg is None or not pkg["audits"]:
        raise FlowAborted("enclave package has no audit")
    for audit in pkg["audits"]:
        h = crypto.Digest.fromhex(audit["report_hash"])
        if world.repo.get(h) is None or not verify_anchored(h, world.chain):
            raise FlowAborted("audit report missing or not anchored")
    raw = world.repo.get(crypto.Digest.fromhex(inst["ias_report_hash"]))
    if raw is None:
        raise FlowAborted("attestation report missing from repository")
    report = AttestationReport.parse(raw)
    measurement = bytes.fromhex(inst["measurement"])
    if not verify_report(report, world.ias.public, enclave_pubkey=pubkey, measurement=measurement):
        raise FlowAborted("attestation report does not verify")
    if max_age is not None and world.clock.now - report.timestamp > max_age:
        if runner is None:
            raise FlowAborted("attestation report is stale")
        nonce = (nonce_rng or world.rng.split("nonce")).bytes(16)
        enclave = next(e for e in runner.enclaves.values() if e.pubkey == pubkey)
        fresh = world.sp.sp_forward(enclave.quote(nonce))
        if not verify_report(fresh, world.ias.public, nonce=nonce, enclave_pubkey=pubkey, measurement=measurement):
            raise FlowAborted("re-attestation failed")
        return True
    return False


# --- flow A: enclave registration, audit, attestation ---------------------------


def flow_enclave_onboarding(world: World, developer: Actor, auditor: Actor | None, runner: EnclaveRunner,
                            image: EnclaveImage, source: bytes, *, runner_image: EnclaveImage | None = None,
                            kinds=("Validation", "Training", "Query"), validator: ValidatorConfig | None = None,
                            runner_checks_audit: bool = True) -> dict:
    """Register, audit and attest ``image``; returns kind -> launched Enclave.

    ``runner_image`` models a runner holding a different binary than the one
    registered (tamper injection).
    """
    src_h = world.repo.put(source, 2)
    img_h = world.repo.put(image.to_bytes(), 2)
    measurement = image.measurement
    assert img_h.value == measurement
    res, _ = world.transact(developer.account, "registry", "register_package",
                            source_hash=src_h.hex(), measurement=measurement.hex())
    if res != "ok":
        raise FlowAborted(f"package registration failed: {res}")

    if auditor is not None:
        got_src, got_img = world.repo.get(src_h), world.repo.get(img_h)
        if got_src is None or got_img is None or not verify_anchored(src_h, world.chain):
            raise FlowAborted("auditor could not fetch anchored sources")
        audit = canonical_json(
            {"auditor": auditor.public.hex(), "measurement": measurement.hex(),
             "source_hash": src_h.hex(), "finding": "no exfiltration paths; rules 1-4 enforced"}
        )
        audit_h = world.repo.put(audit, 2)
        res, _ = world.transact(auditor.account, "registry", "register_audit",
                                measurement=measurement.hex(), report_hash=audit_h.hex())
        if res != "ok":
            raise FlowAborted(f"audit registration failed: {res}")

    if runner_checks_audit:
        pkg = world.contracts.package(measurement)
        if pkg is None or not pkg["audits"]:
            raise FlowAborted("runner found no audit for the package")
        for a in pkg["audits"]:
            if world.repo.get(crypto.Digest.fromhex(a["report_hash"])) is None:
                raise FlowAborted("audit report unavailable")

    held = runner_image or image
    launched = {}
    for kind in kinds:
        enc = launch(runner.cpu, held, kind, runner.rng.split(f"launch-{kind}-{len(world.enclaves)}"),
                     chain=world.chain, wire=world.wire, validator=validator, submit=runner.host_submit(world))
        nonce = runner.rng.split(f"nonce-{kind}-{len(world.enclaves)}").bytes(16)
        report = world.sp.sp_forward(enc.quote(nonce))
        if not verify_report(report, world.ias.public, nonce=nonce, enclave_pubkey=enc.pubkey, measurement=measurement):
            world.aborted.append(f"onboarding:{kind}:attestation")
            raise FlowAborted("attestation failed or measurement differs from the registered package")
        rep_h = world.repo.put(report.serialize(), 2)
        res, _ = world.transact(runner.account, "registry", "register_instance", measurement=measurement.hex(),
                                enclave_pubkey=enc.pubkey.hex(), ias_report_hash=rep_h.hex(), kind=kind)
        if res != "ok":
            world.aborted.append(f"onboarding:{kind}:register_instance")
            raise FlowAborted(f"instance registration failed: {res}")
        world.enclaves.append(enc)
        runner.enclaves[kind] = enc
        launched[kind] = enc
    return launched


# --- flow B: data validation and registration -----------------------------------


def flow_data_registration(world: World, owner: DataOwner, validator: Enclave, runner: EnclaveRunner | None = None) -> dict | None:
    """Validate the owner's data in an enclave and register the report hash.

    Returns the Active registration record, or None for a Fake verdict.
    """
    verify_enclave(world, validator.pubkey, "Validation", runner=runner)
    req = seal_to(validator.pubkey, framed(owner.channel_key.public, owner.dataset.canonical()),
                  owner.rng.split(f"validate-{world.clock.now}"), world.wire)
    processed_ct, report = validator.validate_data(req)
    if report.verdict != "Valid" or not report.signature_ok():
        log.info("%s: dataset rejected by validator", owner.name)
        return None
    owner.processed = crypto.pk_decrypt(owner.channel_key.secret, processed_ct)
    res, out = world.transact(owner.account, "registry", "register_data", report=report.fields())
    if res != "ok":
        raise FlowAborted(f"data registration failed: {res}")
    owner.report = report
    return world.contracts.active_registration(owner.public.hex(), out["report_hash"])


# --- model registration and flow C: recruiting ----------------------------------


def register_model(world: World, trainer: ModelTrainer, whitepaper: bytes, training_enclave: Enclave,
                   price: int, split: dict, query_program: vm.Program) -> bytes:
    wp_h = world.repo.put(whitepaper, 2)
    res, out = world.transact(
        trainer.account, "registry", "register_model", whitepaper_hash=wp_h.hex(),
        training_enclave=training_enclave.pubkey.hex(), price=price, split=split,
        query_program_hash=query_program.program_hash.hex(),
    )
    if res != "ok":
        raise FlowAborted(f"model registration failed: {res}")
    return bytes.fromhex(out["model_id"])


def flow_model_recruiting(world: World, trainer: ModelTrainer, call: RecruitingCall, owners: list[DataOwner],
                          training_enclave: Enclave, runner: EnclaveRunner | None = None) -> list[DataOwner]:
    """Broadcast the call, let each owner's Dapp decide, ingest data, register donors."""
    model = world.contracts.model(call.model_id)
    if model is None or model.status != "Recruiting":
        raise FlowAborted("model is not recruiting")
    for a in [trainer.p2p] + [o.p2p for o in owners]:
        world.net.p2p_register(a)
    binding = make_binding(trainer.account.keypair, trainer.p2p.p2p_id)
    world.net.send_broadcast(trainer.p2p, call.encode(), binding)

    interested = []
    for owner in owners:
        for msg in world.net.drain(owner.p2p.p2p_id):
            if msg.kind != BROADCAST or not msg.signature_ok():
                continue
            got = RecruitingCall.decode(msg.payload)
            if got.model_id != call.model_id:
                continue
            if world.repo.get(crypto.Digest(got.whitepaper_hash)) is None or not verify_anchored(got.whitepaper_hash, world.chain):
                continue
            if owner.dataset is None or owner.report is None:
                continue
            if not owner.dataset.covers(got.required_panel, got.required_traits):
                continue
            if not owner.policy.consents(got.tags):
                continue
            owner.contacted.append(got.model_id)
            reply = canonical_json({"model_id": got.model_id.hex(), "match": True, "report": owner.report.fields()})
            world.net.send_unicast(owner.p2p, msg.sender_p2p, reply)
            interested.append(owner)

    accepted = set()
    for msg in world.net.drain(trainer.p2p.p2p_id):
        if msg.kind == UNICAST and msg.signature_ok():
            accept = canonical_json({"model_id": call.model_id.hex(), "enclave": training_enclave.pubkey.hex()})
            world.net.send_unicast(trainer.p2p, msg.sender_p2p, accept)
            accepted.add(msg.sender_p2p)

    donors = []
    for owner in interested:
        if owner.p2p.p2p_id not in accepted:
            continue
        world.net.drain(owner.p2p.p2p_id)
        try:
            if model.training_enclave != training_enclave.pubkey.hex():
                raise FlowAborted("enclave is not the model's training enclave")
            if verify_enclave(world, training_enclave.pubkey, "Training", max_age=owner.policy.max_report_age,
                              runner=runner, nonce_rng=owner.rng.split(f"nonce-{world.clock.now}")):
                owner.reattested += 1
            req = seal_to(training_enclave.pubkey, framed(owner.public, owner.dataset.canonical()),
                          owner.rng.split(f"donate-{call.model_id.hex()}"), world.wire)
            receipt = training_enclave.ingest_donor_data(req, owner.report, call.model_id)
            res, _ = world.transact(owner.account, "registry", "register_donor", model_id=call.model_id.hex(),
                                    owner=owner.public.hex(), quality=receipt.quality,
                                    enclave_sig=receipt.enclave_sig.hex())
            if res != "ok":
                training_enclave.drop_donor(owner.public)
                raise FlowAborted(f"donor registration failed: {res}")
            donors.append(owner)
        except (FlowAborted, IngestRejected) as exc:
            log.info("%s stops participating: %s", owner.name, exc)
            world.aborted.append(f"recruiting:{owner.name}")
    return donors


# --- flow D: training ------------------------------------------------------------


def purchase_code(world: World, buyer: Actor, model_id: bytes, amount: int) -> bytes:
    secret = buyer.rng.split(f"code-{world.clock.now}-{buyer.account.nonce}").bytes(32)
    res, _ = world.transact(buyer.account, "token", "purchase_access_code", model_id=model_id.hex(),
                            code_hash=crypto.digest(secret).hex(), amount=amount)
    if res != "ok":
        raise FlowAborted(f"payment failed: {res}")
    return secret


def ask(world: World, user, enclave: Enclave, secret: bytes, dataset: Dataset) -> list:
    """Send one paid query and decrypt the answer."""
    req = seal_to(enclave.pubkey, framed(secret, dataset.canonical(), user.channel_key.public),
                  user.rng.split(f"query-{crypto.digest(secret).hex()}"), world.wire)
    answer = enclave.query(req)
    world.confirm()  # mines the enclave's consume_and_distribute
    return vm.parse_emitted(crypto.pk_decrypt(user.channel_key.secret, answer))


def flow_training(world: World, trainer: ModelTrainer, model_id: bytes, program: vm.Program, epochs: int,
                  runner: EnclaveRunner, *, query_program: vm.Program, features, label: str,
                  dummy_p: float = 0.1, depth_range=(1, 8), mid_training=None) -> dict:
    """Recruiting -> Training -> train -> paid evaluation -> handoff -> Trained."""
    model = world.contracts.model(model_id)
    if model is None or model.status != "Recruiting":
        raise FlowAborted("model is not in Recruiting")
    if not any(not d.withdrawn for d in model.donors):
        raise FlowAborted("no donors; refusing to train")
    training = runner.enclaves["Training"]
    res, _ = world.transact(trainer.account, "registry", "set_model_status", model_id=model_id.hex(), new_status="Training")
    if res != "ok":
        raise FlowAborted(res)
    if mid_training is not None:
        mid_training()
    before = training.external_out
    summary = training.train(program, epochs, world.rng.split(f"train-{model_id.hex()}"), features=features,
                             label=label, query_program=query_program, dummy_p=dummy_p, depth_range=depth_range)
    world.training_output.append(training.external_out - before)
    if summary["status"] != vm.HALTED:
        world.aborted.append(f"training:{summary['status']}:{summary['reason']}")
        raise FlowAborted(f"training aborted: {summary['status']} {summary['reason']}")

    evaluation = []
    if trainer.eval_dataset is not None:
        secret = purchase_code(world, trainer, model_id, world.contracts.model(model_id).price)
        evaluation = ask(world, trainer, training, secret, trainer.eval_dataset)

    query = runner.enclaves["Query"]
    grant = TrainingGrant.issue(trainer.account.keypair, model_id, query.measurement)
    query.import_trained(training.export_trained(), grant)
    query.load_query_program(query_program)
    res, _ = world.transact(trainer.account, "registry", "set_model_status", model_id=model_id.hex(),
                            new_status="Trained", runner_enclave=query.pubkey.hex())
    if res != "ok":
        raise FlowAborted(res)
    return {"summary": summary, "evaluation": evaluation}


# --- flow E: query ---------------------------------------------------------------


def flow_query(world: World, user: EndUser, model_id: bytes, query_enclave: Enclave, validator: Enclave,
               *, pay: bool = True) -> list:
    """Register data if needed, pay, query, decrypt."""
    model = world.contracts.model(model_id)
    if model is None or model.status != "Trained":
        raise FlowAborted("model is not trained")
    if user.report is None or world.contracts.active_registration(user.public.hex(), user.report.report_hash.hex()) is None:
        if flow_data_registration(world, user, validator) is None:
            raise FlowAborted("user data failed validation")
    if pay:
        secret = purchase_code(world, user, model_id, model.price)
    else:
        secret = user.rng.split("unpaid").bytes(32)
    try:
        return ask(world, user, query_enclave, secret, user.dataset)
    except QueryRefused:
        world.aborted.append(f"query:{user.name}:refused")
        raise


def new_actor(cls, name: str, rng: crypto.Rng, **kw):
    sub = rng.split(f"actor-{name}")
    return cls(name, create_account(sub.split("chain")), sub, **kw)
