from fractions import Fraction

import pytest

from xheep_sim.cpu import parse_microprogram
from xheep_sim.errors import ConfigurationError
from xheep_sim.kernel import SimClock, Simulator, StopCondition
from xheep_sim.peripherals import AdcStream, DmaStatus, WordFifo, sine_generator
from xheep_sim.platform import IRQ_DMA, Platform, PlatformConfig


def run(p, ff=True, limit=100_000):
    sim = Simulator(p, ff)
    sim.run(StopCondition.all_halted(limit))
    return sim


@pytest.mark.parametrize("ff", [True, False])
def test_dma_copy_of_64_words_takes_65_cycles(ff):
    p = Platform(PlatformConfig())
    src, dst = p.bank_base(1), p.bank_base(2)
    for k in range(64):
        p.write_word(src + 4 * k, 0xA000 + k)
    ch = p.dma.channels[0]
    ch.configure(src, dst, 256)
    p.dma.start(0, 0)
    run(p, ff)
    assert ch.status is DmaStatus.DONE
    assert ch.done_cycle == 65
    assert [p.read_word(dst + 4 * k) for k in range(64)] == [0xA000 + k for k in range(64)]
    assert p.interrupts.lines[IRQ_DMA].pending


def test_dma_strided_gather():
    p = Platform(PlatformConfig())
    src, dst = p.bank_base(1), p.bank_base(3)
    for k in range(8):
        p.write_word(src + 16 * k, k * k)
    p.dma.channels[0].configure(src, dst, 32, src_stride=16)
    p.dma.start(0)
    run(p)
    assert [p.read_word(dst + 4 * k) for k in range(8)] == [k * k for k in range(8)]


def test_dma_reconfigure_while_busy_is_rejected():
    p = Platform(PlatformConfig())
    text = """STORE dma value=bank1
STORE dma+4 value=bank2
STORE dma+8 value=1024
STORE dma+0x1c value=1
STORE dma+4 value=bank3
HALT
"""
    cpu = p.load_program(parse_microprogram(text, p.symbols))
    run(p)
    assert cpu.trapped
    assert any(e["kind"] == "dma-busy-write" for e in p.events)
    ch = p.dma.channels[0]
    assert ch.dst == p.bank_base(2)


def test_dma_double_start_is_rejected():
    p = Platform(PlatformConfig())
    ch = p.dma.channels[0]
    ch.configure(p.bank_base(1), p.bank_base(2), 64)
    p.dma.start(0)
    with pytest.raises(ConfigurationError):
        p.dma.start(0)
    with pytest.raises(ConfigurationError):
        ch.configure(0, 0, 4)


def test_dma_error_on_bad_address():
    p = Platform(PlatformConfig())
    p.dma.channels[0].configure(0x1F00_0000, p.bank_base(1), 16)
    p.dma.start(0)
    run(p)
    assert p.dma.channels[0].status is DmaStatus.ERROR
    assert any(e["kind"] == "dma-error" for e in p.events)


def test_adc_paced_by_wall_time():
    clock = SimClock(Fraction(1_000_000), Fraction(4, 5))
    adc = AdcStream(clock, channel_count=3, sample_rate_hz=256, fifo_depth_words=10_000)
    c = adc.next_event(0)
    while c < 1_000_000:
        adc.tick(c)
        c = adc.next_event(c + 1)
    assert adc.next_instant == 256
    assert adc.samples_produced == 768
    assert len(adc.fifo) == 768


def test_adc_overflow_drops_oldest():
    clock = SimClock(Fraction(1000), Fraction(4, 5))
    adc = AdcStream(clock, channel_count=2, sample_rate_hz=100, fifo_depth_words=4,
                    generator=lambda n, lead: 10 * n + lead)
    for c in range(100):
        adc.tick(c)
    assert adc.samples_produced == 20
    assert adc.overflow_events == 16 and adc.samples_dropped == 16
    assert list(adc.fifo.words) == [80, 81, 90, 91]


def test_adc_packs_samples():
    clock = SimClock(Fraction(1000), Fraction(4, 5))
    adc = AdcStream(clock, channel_count=2, sample_rate_hz=1000, sample_bits=16, samples_per_word=2,
                    generator=lambda n, lead: lead + 1)
    adc.tick(0)
    assert list(adc.fifo.words) == [0x0002_0001]
    with pytest.raises(ConfigurationError):
        AdcStream(clock, sample_bits=16, samples_per_word=3)


def test_adc_to_memory_through_dma():
    gen = sine_generator(500, 2.0, 256)
    p = Platform(PlatformConfig(frequency_hz=Fraction(1_000_000)))
    p.adc.generator = gen
    p.adc.enable(0)
    ch = p.dma.channels[0]
    ch.configure(p.adc.fifo, p.bank_base(1), 4 * 30)
    p.dma.start(0)
    run(p, limit=2_000_000)
    assert ch.status is DmaStatus.DONE
    expected = [gen(k // 3, k % 3) & 0xFFFF for k in range(30)]
    assert [p.read_word(p.bank_base(1) + 4 * k) for k in range(30)] == expected
    assert p.adc.overflow_events == 0


def test_timer_registers_wake_cpu():
    p = Platform(PlatformConfig())
    text = "STORE timer_ao+4 value=50\nSTORE timer_ao+8 value=1\nWFI\nHALT\n"
    cpu = p.load_program(parse_microprogram(text, p.symbols))
    run(p)
    assert p.timer_ao.fired == 1
    assert 50 < cpu.halt_cycle <= 53


def test_uart_collects_bytes(tmp_path):
    log = tmp_path / "uart.log"
    p = Platform(PlatformConfig(uart_log=str(log)))
    text = "".join(f"STORE uart value={ord(ch)}\n" for ch in "ok") + "HALT\n"
    p.load_program(parse_microprogram(text, p.symbols))
    run(p)
    assert p.uart.output == "ok"
    assert log.read_text() == "ok"


def test_flash_reads_image_with_latency():
    image = (0xCAFEF00D).to_bytes(4, "little") + (7).to_bytes(4, "little")
    p = Platform(PlatformConfig(flash_image=image))
    cpu = p.load_program(parse_microprogram("LOAD flash 2\nSTORE bank1 2\nHALT\n", p.symbols))
    run(p)
    assert [p.read_word(p.bank_base(1)), p.read_word(p.bank_base(1) + 4)] == [0xCAFEF00D, 7]
    assert p.flash.word(100) == 0xFFFFFFFF
    # two reads at 1 + fetch latency each, then two single-cycle stores
    assert cpu.halt_cycle == 1 + 2 * 5 + 2


def test_flash_is_read_only():
    p = Platform(PlatformConfig())
    cpu = p.load_program(parse_microprogram("STORE flash value=1\nHALT\n", p.symbols))
    run(p)
    assert cpu.trapped


def test_flash_stream_into_fifo():
    p = Platform(PlatformConfig(flash_image=bytes(range(64))))
    p.flash.start_stream(0, 64, 0)
    ch = p.dma.channels[0]
    ch.configure(p.flash.fifo, p.bank_base(1), 64)
    p.dma.start(0)
    run(p)
    assert p.read_word(p.bank_base(1) + 4) == int.from_bytes(bytes([4, 5, 6, 7]), "little")


def test_peripheral_domain_off_faults_but_plic_stays_reachable():
    p = Platform(PlatformConfig())
    p.force_power("periph", "off")
    cpu = p.load_program(parse_microprogram("LOAD plic+0x2004\nHALT\n", p.symbols))
    run(p)
    assert not cpu.trapped
    p = Platform(PlatformConfig())
    p.force_power("periph", "off")
    cpu = p.load_program(parse_microprogram("LOAD timer\nHALT\n", p.symbols))
    run(p)
    assert cpu.trapped


def test_word_fifo_depth():
    f = WordFifo("f", 2)
    f.push(1)
    f.push(2)
    assert f.full and f.pop() == 1
    with pytest.raises(ConfigurationError):
        WordFifo("g", 0)


def test_adc_fifo_of_four_overflows_four_times_on_eight_samples():
    clock = SimClock(Fraction(1000), Fraction(4, 5))
    adc = AdcStream(clock, channel_count=1, sample_rate_hz=1000, fifo_depth_words=4)
    for c in range(8):
        adc.tick(c)
    assert adc.overflow_events == 4 and len(adc.fifo) == 4


def test_adc_pacing_ignores_frequency_changes():
    clock = SimClock(Fraction(1_000_000), Fraction(4, 5))
    adc = AdcStream(clock, channel_count=1, sample_rate_hz=1000, fifo_depth_words=10_000)
    c = adc.next_event(0)
    while c < 500_000:
        adc.tick(c)
        c = adc.next_event(c + 1)
    clock.set_operating_point(Fraction(10_000_000), Fraction(4, 5), cycle=500_000)
    c = adc.next_event(500_000)
    while c < 500_000 + 5_000_000:
        adc.tick(c)
        c = adc.next_event(c + 1)
    assert adc.samples_produced == 1000


def test_dma_from_an_empty_fifo_stalls_without_grants():
    p = Platform(PlatformConfig())
    ch = p.dma.channels[0]
    ch.configure(p.adc.fifo, p.bank_base(1), 16)
    p.dma.start(0)
    sim = Simulator(p, False)
    for _ in range(50):
        sim.step()
    assert p.bus.total_grants == 0 and ch.status is DmaStatus.BUSY
