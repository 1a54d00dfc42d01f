"""Small builders shared by the tests."""

from v2gids.core import AGGREGATOR, Direction, FlowReservation, MessageKind, Packet

K = MessageKind
MIN = 60_000


def res(ev="ev1", start=0, end=120 * MIN, direction=Direction.CHARGE, rated=3.0):
    return FlowReservation(ev, start, end, direction, rated)


def pkt(kind, t, ev="ev1", power=None, reservation=None):
    if kind.from_aggregator:
        return Packet(src=AGGREGATOR, dst=ev, arrival=t, kind=kind, power_kw=power,
                      reservation=reservation)
    return Packet(src=ev, arrival=t, kind=kind, power_kw=power, reservation=reservation)


def packets_for(kinds, ev="ev1", start=1000, gap=1000, reservation=None):
    """Concrete packets for a kind sequence, with payloads that satisfy every guard."""
    reservation = reservation or res(ev, 0, 10**9)
    out, t = [], start
    for k in kinds:
        out.append(pkt(k, t, ev,
                       power=3.0 if k is K.POWER_STATUS_UPDATE else None,
                       reservation=reservation if k.carries_reservation else None))
        t += gap
    return out
