"""Deterministic function registry used by the executable-accuracy fixtures."""

RATES = {("USD", "TWD"): 32.0, ("USD", "JPY"): 150.0, ("USD", "EUR"): 0.5, ("GBP", "JPY"): 190.0}
WEATHER = {"Taipei": "sunny", "Tokyo": "rain", "Tainan": "cloudy"}


def add(a, b):
    return a + b


def calc_area(base, height, unit="cm"):
    return base * height / 2


def convert_currency(amount, from_cur, to_cur):
    return round(amount * RATES[(from_cur, to_cur)], 2)


def get_weather(city, unit="celsius"):
    return WEATHER[city]


def explode(reason):
    raise RuntimeError(reason)


REGISTRY = {
    "add": add,
    "calc_area": calc_area,
    "convert_currency": convert_currency,
    "get_weather": get_weather,
    "explode": explode,
}
